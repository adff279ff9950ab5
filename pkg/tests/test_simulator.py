"""Timing-model checks: overlap, monotonicity, ablations, channel and bank
modeling, byte conservation, and profile loading."""

import json
import warnings

import pytest

from rpakit.attention import AttentionConfig
from rpakit.batch import Bounds, build
from rpakit.engine import BlockParams, trace_workload
from rpakit.errors import MalformedTrace, ParseError
from rpakit.simulator import (
    AblationFlags,
    HardwareProfile,
    SimReport,
    load_profile,
    mxu_utilization,
    simulate,
    vmem_footprint,
)
from rpakit.trace import Event, EventTrace

TPU7X = load_profile("tpu7x")
LLAMA = dict(h_q=32, h_kv=8, d_k=128)


def decode_trace(n, ctx, b_kv=2048, c_kv=1024, **model):
    m = {**LLAMA, **model}
    cfg = AttentionConfig(m["h_q"], m["h_kv"], m["d_k"], causal=True, p_q=2, p_kv=2)
    batch = build([1] * n, [ctx] * n, Bounds(n, n))
    return trace_workload(batch, cfg, BlockParams(1, b_kv, 1, c_kv), dtype="bf16")


def prefill_trace(s, bp=BlockParams(512, 512, 512, 512), causal=True, **model):
    m = {**LLAMA, **model}
    cfg = AttentionConfig(m["h_q"], m["h_kv"], m["d_k"], causal=causal, p_q=2, p_kv=2)
    batch = build([s], [s], Bounds(s, 1), chunk_size=s)
    return trace_workload(batch, cfg, bp, dtype="bf16")


def synthetic_compute(flops, bank_stride, d_k=256, cols=256):
    t = EventTrace()
    t.append(Event("fetch_q", 0, (0,), bytes=0))
    t.append(Event("fetch_kv", 0, (0, 0), bytes=0))
    t.append(Event("compute", 0, (0, 0), flops=flops, rows=8, cols=cols, d_k=d_k,
                   bank_stride=bank_stride))
    return t


class TestScheduling:
    def test_overlap_law(self):
        # prefetch of block 1 runs under compute of block 0: equal-cost DMA
        # and compute give total == max, not sum
        hw = HardwareProfile(hbm_bandwidth=1e9, peak_flops=1e12, dma_base_latency=0.0)
        t = EventTrace()
        t.append(Event("fetch_q", 0, (0,), bytes=0))
        t.append(Event("fetch_kv", 0, (0, 0), bytes=0))
        t.append(Event("fetch_kv", 0, (0, 1), bytes=int(1e7)))  # 0.01 s
        t.append(Event("compute", 0, (0, 0), flops=int(1e10),  # 0.01 s at util 1
                       rows=8, cols=256, d_k=256, bank_stride=17))
        t.append(Event("compute", 0, (0, 1), flops=0, rows=8, cols=256, d_k=256,
                       bank_stride=17))
        r = simulate(t, hw)
        assert r.total_latency == pytest.approx(0.01, rel=1e-9)
        assert r.dma_busy == pytest.approx(0.01)
        assert r.compute_busy == pytest.approx(0.01)

    def test_serial_when_dependent(self):
        # a compute that needs its own fetch cannot overlap with it
        hw = HardwareProfile(hbm_bandwidth=1e9, peak_flops=1e12, dma_base_latency=0.0)
        t = synthetic_compute(int(1e10), 17)
        t.events[1].bytes = int(1e7)
        r = simulate(t, hw)
        assert r.total_latency == pytest.approx(0.02)

    def test_monotonic_in_bandwidth_and_flops(self):
        t = decode_trace(4, 2048, b_kv=512, c_kv=512)
        base = simulate(t, TPU7X).total_latency
        for factor in (2, 4, 16):
            fast_bw = HardwareProfile(
                hbm_bandwidth=TPU7X.hbm_bandwidth * factor,
                peak_flops=TPU7X.peak_flops,
                dma_base_latency=TPU7X.dma_base_latency,
            )
            fast_fl = HardwareProfile(
                hbm_bandwidth=TPU7X.hbm_bandwidth,
                peak_flops=TPU7X.peak_flops * factor,
                dma_base_latency=TPU7X.dma_base_latency,
            )
            assert simulate(t, fast_bw).total_latency <= base
            assert simulate(t, fast_fl).total_latency <= base

    def test_missing_dependency_raises(self):
        t = EventTrace()
        t.append(Event("fetch_q", 0, (0,), bytes=4))
        t.append(Event("compute", 0, (0, 0), flops=8, rows=1, cols=1, d_k=1,
                       bank_stride=3))
        with pytest.raises(MalformedTrace):
            simulate(t, TPU7X)

    def test_single_channel_serializes_writeback(self):
        t = decode_trace(4, 4096, b_kv=512, c_kv=512)
        two = simulate(t, TPU7X).total_latency
        one_ch = HardwareProfile(
            hbm_bandwidth=TPU7X.hbm_bandwidth,
            peak_flops=TPU7X.peak_flops,
            dma_base_latency=TPU7X.dma_base_latency,
            num_dma_channels=1,
        )
        one = simulate(t, one_ch).total_latency
        assert one > two


class TestAblations:
    def test_kv_update_hides_on_decode(self):
        t = decode_trace(8, 8192)
        base = simulate(t, TPU7X)
        off = simulate(t, TPU7X, AblationFlags(disable_kv_update=True))
        assert abs(base.total_latency - off.total_latency) / base.total_latency < 0.01
        assert off.bytes_moved < base.bytes_moved

    def test_fa_negligible_on_decode(self):
        t = decode_trace(8, 4096)
        base = simulate(t, TPU7X)
        off = simulate(t, TPU7X, AblationFlags(disable_flash_attention=True))
        assert abs(base.total_latency - off.total_latency) / base.total_latency < 0.02
        assert off.flops_executed == 0

    def test_disable_dma_leaves_pure_compute(self):
        t = prefill_trace(2048)
        r = simulate(t, TPU7X, AblationFlags(disable_dma=True))
        assert r.total_latency == pytest.approx(r.compute_busy, rel=1e-12)
        assert r.bytes_moved == 0 and r.dma_busy == 0

    def test_prefill_compute_bound_at_scale(self):
        t = prefill_trace(8192, bp=BlockParams(1024, 1024, 1024, 1024))
        base = simulate(t, TPU7X)
        off = simulate(t, TPU7X, AblationFlags(disable_flash_attention=True))
        assert base.total_latency / off.total_latency > 5

    def test_unknown_ablation_name(self):
        with pytest.raises(ParseError):
            AblationFlags.from_name("everything")
        assert AblationFlags.from_name("kv-update").disable_kv_update
        assert AblationFlags.from_name(None) == AblationFlags()


class TestAccounting:
    def test_decode_byte_conservation(self):
        n, ctx = 8, 4096
        t = decode_trace(n, ctx)
        r = simulate(t, TPU7X)
        want = n * 128 * ((ctx + 1) * 2 * 8 + 2 * 32) * 2
        assert r.bytes_moved == want == t.bytes_moved()

    def test_mbu_mfu_fractions(self):
        r = simulate(decode_trace(8, 8192), TPU7X)
        assert 0 < r.mbu < 1
        assert r.mbu == pytest.approx(
            r.bytes_moved / r.total_latency / TPU7X.hbm_bandwidth
        )
        assert 0 < r.mfu < 1

    def test_mbu_regime_trend(self):
        mbus = [simulate(decode_trace(8, ctx), TPU7X).mbu
                for ctx in (512, 2048, 8192, 32768)]
        assert all(b >= a for a, b in zip(mbus, mbus[1:]))
        assert mbus[0] < 0.6 and mbus[-1] > 0.7

    def test_overlap_bound(self):
        r = simulate(decode_trace(4, 2048, b_kv=512, c_kv=512), TPU7X)
        assert r.total_latency <= r.dma_busy + r.compute_busy


class TestComputeModel:
    def test_bank_conflict_penalty(self):
        hw = HardwareProfile(hbm_bandwidth=1e9, peak_flops=1e12)
        odd = simulate(synthetic_compute(int(1e9), 17), hw)
        even = simulate(synthetic_compute(int(1e9), 16), hw)
        assert even.compute_busy == pytest.approx(2 * odd.compute_busy)

    def test_mxu_utilization_values(self):
        assert mxu_utilization(128) == 0.5
        assert mxu_utilization(256) == 1.0
        assert mxu_utilization(512) == 1.0  # capped
        assert mxu_utilization(128, cols=128) == 0.25
        assert mxu_utilization(128, rows=1, cols=512) == 0.5  # rows stream
        with pytest.raises(ValueError):
            mxu_utilization(0)

    def test_narrow_tile_slows_compute(self):
        hw = HardwareProfile(hbm_bandwidth=1e9, peak_flops=1e12)
        wide = simulate(synthetic_compute(int(1e9), 17, d_k=128, cols=512), hw)
        narrow = simulate(synthetic_compute(int(1e9), 17, d_k=128, cols=64), hw)
        assert narrow.compute_busy == pytest.approx(4 * wide.compute_busy)


class TestVmem:
    def test_oversubscription_warns(self):
        hw = HardwareProfile(hbm_bandwidth=1e9, peak_flops=1e12, vmem_bytes=1024)
        t = decode_trace(2, 512, b_kv=512, c_kv=512)
        with pytest.warns(RuntimeWarning):
            r = simulate(t, hw)
        assert r.vmem_exceeded
        assert vmem_footprint(t) > 1024

    def test_fits_quietly(self):
        t = decode_trace(2, 512, b_kv=512, c_kv=512)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            r = simulate(t, TPU7X)
        assert not r.vmem_exceeded


class TestProfiles:
    def test_bundled_tpu7x(self):
        assert TPU7X.name == "tpu7x"
        assert TPU7X.hbm_bandwidth == 7380 * 2**30
        assert TPU7X.peak_flops == 2307e12
        assert TPU7X.mxu_dim == 256
        assert TPU7X.num_dma_channels == 2

    def test_env_dir_override(self, tmp_path, monkeypatch):
        prof = dict(name="toy", hbm_bandwidth=1e9, peak_flops=1e12)
        (tmp_path / "toy.json").write_text(json.dumps(prof))
        monkeypatch.setenv("RPA_PROFILE_DIR", str(tmp_path))
        hw = load_profile("toy")
        assert hw.name == "toy" and hw.hbm_bandwidth == 1e9

    def test_missing_profile(self):
        with pytest.raises(FileNotFoundError):
            load_profile("does-not-exist")

    def test_bad_profile_json(self, tmp_path):
        p = tmp_path / "broken.json"
        p.write_text("{nope")
        with pytest.raises(ParseError):
            load_profile(str(p))
        p2 = tmp_path / "fields.json"
        p2.write_text(json.dumps({"name": "x", "unknown_field": 1}))
        with pytest.raises(ParseError):
            load_profile(str(p2))

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            HardwareProfile(hbm_bandwidth=-1, peak_flops=1)
        with pytest.raises(ValueError):
            HardwareProfile(hbm_bandwidth=1, peak_flops=1, dma_base_latency=-1e-9)


class TestReport:
    def test_json_shape(self):
        r = simulate(decode_trace(2, 512, b_kv=512, c_kv=512), TPU7X)
        d = r.to_json()
        assert "timeline" not in d
        assert set(d) == {
            "total_latency", "dma_busy", "compute_busy", "bytes_moved",
            "flops_executed", "mbu", "mfu", "vmem_exceeded",
        }
        full = r.to_json(include_timeline=True)
        assert isinstance(full["timeline"], list) and full["timeline"]

    def test_timeline_disabled(self):
        r = simulate(decode_trace(2, 512, b_kv=512, c_kv=512), TPU7X,
                     keep_timeline=False)
        assert r.timeline == []
        assert isinstance(r, SimReport)
