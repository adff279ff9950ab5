"""Model profiles, sweep reports, writers, and figure rendering."""

import json

import pytest

from rpakit.errors import ParseError
from rpakit.reporting import (
    ModelProfile,
    load_model_profile,
    render_figure,
    report_csv,
    report_json,
    sweep,
    write_report,
)
from rpakit.simulator import load_profile

HW = load_profile("tpu7x")
LADDER = [512, 1024, 2048]


@pytest.fixture(scope="module")
def llama():
    return load_model_profile("llama3-8b")


@pytest.fixture(scope="module")
def decode_report(llama):
    return sweep(llama, HW, "decode", lengths=LADDER, n=16)


class TestModelProfiles:
    def test_bundled(self, llama):
        assert (llama.h_q, llama.h_kv, llama.d_k, llama.dtype) == (32, 8, 128, "bf16")
        wide = load_model_profile("llama3-8b-hd256")
        assert wide.d_k == 256

    def test_by_path(self, tmp_path, llama):
        path = tmp_path / "custom.json"
        path.write_text(json.dumps({"name": "custom", "h_q": 4, "h_kv": 2,
                                    "d_k": 16, "dtype": "f32"}))
        assert load_model_profile(path).h_q == 4

    def test_env_dir(self, tmp_path, monkeypatch):
        (tmp_path / "mini.json").write_text(json.dumps(
            {"name": "mini", "h_q": 2, "h_kv": 1, "d_k": 8, "dtype": "bf16"}))
        monkeypatch.setenv("RPA_PROFILE_DIR", str(tmp_path))
        assert load_model_profile("mini").d_k == 8

    def test_unknown_name(self):
        with pytest.raises(FileNotFoundError):
            load_model_profile("no-such-model")

    def test_malformed(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{")
        with pytest.raises(ParseError):
            load_model_profile(bad)
        bad.write_text(json.dumps({"name": "x", "h_q": 4}))
        with pytest.raises(ParseError):
            load_model_profile(bad)
        bad.write_text(json.dumps({"name": "x", "h_q": 4, "h_kv": 2, "d_k": 8,
                                   "dtype": "bf16", "extra": 1}))
        with pytest.raises(ParseError):
            load_model_profile(bad)

    def test_validation(self):
        with pytest.raises(ValueError):
            ModelProfile("x", 5, 2, 16, "bf16")  # h_q not a multiple of h_kv
        with pytest.raises(Exception):
            ModelProfile("x", 4, 2, 16, "int3")


class TestSweep:
    def test_decode_shape(self, decode_report):
        assert decode_report.header == (
            "context_length", "latency_us", "throughput_gibs", "mbu_pct",
            "no_kv_update_us", "no_fa_us", "no_dma_us",
        )
        assert decode_report.column("context_length") == LADDER
        assert all(v > 0 for v in decode_report.column("latency_us"))

    def test_decode_mbu_monotone(self, decode_report):
        mbus = decode_report.column("mbu_pct")
        assert all(a <= b for a, b in zip(mbus, mbus[1:]))

    def test_ablations_bounded_by_base(self, decode_report):
        base = decode_report.column("latency_us")
        for col in ("no_kv_update_us", "no_fa_us", "no_dma_us"):
            assert all(a <= b + 1e-9 for a, b in zip(decode_report.column(col), base))

    def test_ablation_subset(self, llama):
        rep = sweep(llama, HW, "decode", lengths=[512], ablations=("kv-update",), n=4)
        assert rep.header[-1] == "no_kv_update_us"
        assert len(rep.header) == 5

    def test_causal_faster_than_dense(self, llama):
        causal = sweep(llama, HW, "prefill", lengths=[4096], ablations=())
        dense = sweep(llama, HW, "prefill-noncausal", lengths=[4096], ablations=())
        assert causal.column("latency_us")[0] < dense.column("latency_us")[0]

    def test_wide_head_doubles_saturated_speed(self, llama):
        wide = load_model_profile("llama3-8b-hd256")
        s128 = sweep(llama, HW, "prefill-noncausal", lengths=[8192], ablations=())
        s256 = sweep(wide, HW, "prefill-noncausal", lengths=[8192], ablations=())
        ratio = s256.column("speed_tflops")[0] / s128.column("speed_tflops")[0]
        assert ratio == pytest.approx(2.0, rel=0.1)

    def test_unknown_workload(self, llama):
        with pytest.raises(ValueError):
            sweep(llama, HW, "training")


class TestWriters:
    def test_csv_deterministic(self, llama):
        a = report_csv(sweep(llama, HW, "decode", lengths=[512, 1024], n=8))
        b = report_csv(sweep(llama, HW, "decode", lengths=[512, 1024], n=8))
        assert a == b
        assert a.splitlines()[0].startswith("context_length,latency_us,")

    def test_json_roundtrip(self, decode_report):
        payload = json.loads(report_json(decode_report))
        assert payload["workload"] == "decode"
        assert payload["hw"] == "tpu7x"
        assert len(payload["rows"]) == len(LADDER)
        assert set(payload["rows"][0]) == set(decode_report.header)

    def test_write_report(self, decode_report, tmp_path):
        csv_path = write_report(decode_report, tmp_path / "r.csv", "csv")
        assert csv_path.read_text().count("\n") == len(LADDER) + 1
        json_path = write_report(decode_report, tmp_path / "r.json", "json")
        assert json.loads(json_path.read_text())["model"] == "llama3-8b"
        with pytest.raises(ValueError):
            write_report(decode_report, tmp_path / "r.xml", "xml")

    def test_figure(self, decode_report, tmp_path):
        out = render_figure(decode_report, tmp_path / "fig.png")
        first = out.read_bytes()
        assert first[:8] == b"\x89PNG\r\n\x1a\n"
        render_figure(decode_report, tmp_path / "fig2.png")
        assert (tmp_path / "fig2.png").read_bytes() == first
