"""Evaluation and export tests. The aggregate metrics are checked against
a hand-rolled accumulation over the same windows, so the report path has an
independent oracle rather than trusting itself."""

import numpy as np
import pytest

from factr import data as D
from factr import evaluation as E
from factr.model import Forecaster, ModelConfig, ModelError
from factr.tensor import no_grad


def setup_case(rows=80, channels=3, seed=0):
    rng = np.random.default_rng(seed)
    vals = rng.standard_normal((rows, channels)).astype(np.float32)
    ds = D.SeriesDataset(vals, [f"ch{i}" for i in range(channels)])
    cfg = ModelConfig(n_channels=channels, lookback=16, horizon=4, patch_len=4,
                      stride=4, d_model=8, fm_rank=2, spatial_rank=2, dropout=0.0)
    model = Forecaster(cfg, seed=1)
    return model, ds


class TestEvaluate:
    def test_matches_manual_accumulation(self):
        model, ds = setup_case()
        rng_range = (0, ds.n_rows)
        report = E.evaluate(model, ds, rng_range, batch_size=7)

        # independent pass: one window at a time, float64 sums
        cfg = model.config
        n = D.window_count(ds.n_rows, cfg.lookback, cfg.horizon)
        sq = np.zeros((cfg.n_channels, cfg.horizon))
        ab = np.zeros_like(sq)
        with no_grad():
            for s in range(n):
                x = ds.values[s:s + cfg.lookback].T[None]
                y = ds.values[s + cfg.lookback:s + cfg.lookback + cfg.horizon].T
                pred = model.forward(np.ascontiguousarray(x)).data[0].astype(np.float64)
                sq += (pred - y) ** 2
                ab += np.abs(pred - y)
        assert report.n_windows == n
        assert report.mse == pytest.approx(sq.mean() / n, rel=1e-9)
        assert report.mae == pytest.approx(ab.mean() / n, rel=1e-9)
        np.testing.assert_allclose(report.per_channel_mse,
                                   sq.mean(axis=1) / n, rtol=1e-9)
        np.testing.assert_allclose(report.per_step_mae,
                                   ab.mean(axis=0) / n, rtol=1e-9)

    def test_aggregation_identities(self):
        model, ds = setup_case(seed=2)
        report = E.evaluate(model, ds, (0, ds.n_rows), batch_size=16)
        assert np.mean(report.per_channel_mse) == pytest.approx(report.mse, rel=1e-9)
        assert np.mean(report.per_step_mse) == pytest.approx(report.mse, rel=1e-9)
        assert np.mean(report.per_channel_mae) == pytest.approx(report.mae, rel=1e-9)

    def test_batch_size_does_not_change_result(self):
        model, ds = setup_case(seed=3)
        r1 = E.evaluate(model, ds, (0, ds.n_rows), batch_size=1)
        r2 = E.evaluate(model, ds, (0, ds.n_rows), batch_size=64)
        assert r1.mse == pytest.approx(r2.mse, rel=1e-12)
        assert r1.mae == pytest.approx(r2.mae, rel=1e-12)

    def test_json_round_trip(self):
        model, ds = setup_case(seed=4)
        report = E.evaluate(model, ds, (0, ds.n_rows))
        again = E.ForecastReport.from_json(report.to_json())
        assert again == report


class TestChannelRanking:
    def test_sorted_worst_first_with_stable_ties(self):
        report = E.ForecastReport(
            mse=1.0, mae=1.0,
            per_channel_mse=[0.5, 2.0, 0.5], per_channel_mae=[0.1, 0.2, 0.3],
            per_step_mse=[], per_step_mae=[], n_windows=1,
            channel_names=["a", "b", "c"])
        ranked = E.rank_channels(report)
        assert [r[0] for r in ranked] == ["b", "a", "c"]


class TestAudit:
    def test_audit_passes_and_reports_blocks(self):
        model, _ = setup_case()
        counts = E.audit_params(model)
        assert counts["enumerated"] == counts["total"] == model.n_params()
        assert counts["head"] > 0

    def test_audit_detects_drift(self):
        from factr.tensor import Tensor
        model, _ = setup_case()
        model.params["rogue"] = Tensor(np.zeros(10), requires_grad=True)
        with pytest.raises(ModelError, match="mismatch"):
            E.audit_params(model)


class TestExports:
    def batch(self, model, ds):
        return next(D.window_iter(ds, (0, ds.n_rows), model.config.lookback,
                                  model.config.horizon, 4))

    def test_interpretability_files_and_determinism(self, tmp_path):
        model, ds = setup_case(seed=5)
        batch = self.batch(model, ds)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        names1 = E.export_interpretability(model, batch, str(out1))
        names2 = E.export_interpretability(model, batch, str(out2))
        for key in names1:
            b1 = open(names1[key], "rb").read()
            b2 = open(names2[key], "rb").read()
            assert b1 == b2, key
            assert len(b1) > 0

    def test_spatial_csv_rows_normalized(self, tmp_path):
        model, ds = setup_case(seed=6)
        names = E.export_interpretability(model, self.batch(model, ds), str(tmp_path))
        rows = open(names["spatial_attention_csv"]).read().strip().split("\n")[1:]
        cfg = model.config
        assert len(rows) == cfg.n_channels ** 2 * cfg.n_patches
        acc = {}
        for line in rows:
            i, j, n, w = line.split(",")
            acc.setdefault((i, n), 0.0)
            acc[(i, n)] += float(w)
        for total in acc.values():
            assert total == pytest.approx(1.0, abs=1e-5)

    def test_temporal_only_variant_cannot_export(self, tmp_path):
        cfg = ModelConfig(n_channels=2, lookback=16, horizon=4, patch_len=4, stride=4,
                          d_model=8, fm_rank=2, spatial_rank=2, dropout=0.0,
                          variant="temporal_only")
        model = Forecaster(cfg, seed=0)
        ds = D.SeriesDataset(np.zeros((40, 2), dtype=np.float32), ["a", "b"])
        batch = next(D.window_iter(ds, (0, 40), 16, 4, 2))
        with pytest.raises(ModelError, match="variant"):
            E.export_interpretability(model, batch, str(tmp_path))

    def test_window_out_of_range(self, tmp_path):
        model, ds = setup_case(seed=7)
        with pytest.raises(ModelError, match="window"):
            E.export_interpretability(model, self.batch(model, ds), str(tmp_path),
                                      window=10)

    def test_forecast_dump_content(self, tmp_path):
        model, ds = setup_case(seed=8)
        names = E.forecast_dump(model, ds, (0, ds.n_rows), [0, 3], str(tmp_path))
        assert set(names) == {"csv_w0", "svg_w0", "csv_w3", "svg_w3"}
        lines = open(names["csv_w0"]).read().strip().split("\n")
        assert lines[0] == "channel,step,prediction,actual"
        assert len(lines) == 1 + model.config.n_channels * model.config.horizon
        svg = open(names["svg_w0"]).read()
        assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")

    def test_forecast_dump_bad_window(self, tmp_path):
        model, ds = setup_case(seed=9)
        with pytest.raises(ModelError, match="out of range"):
            E.forecast_dump(model, ds, (0, ds.n_rows), [10_000], str(tmp_path))


class TestSvgHelpers:
    def test_line_chart_deterministic(self, tmp_path):
        series = {"a": np.sin(np.arange(50) / 5.0), "b": np.cos(np.arange(50) / 5.0)}
        p1, p2 = str(tmp_path / "1.svg"), str(tmp_path / "2.svg")
        E.svg_line_chart(series, p1, "t")
        E.svg_line_chart(series, p2, "t")
        assert open(p1).read() == open(p2).read()

    def test_heatmap_handles_constant_matrix(self, tmp_path):
        path = str(tmp_path / "h.svg")
        E.svg_heatmap(np.ones((3, 3)), path, "const")
        text = open(path).read()
        assert text.count("<rect") == 9 + 1  # cells + background


class TestScalingBenchmark:
    def test_smoke_and_positive_slope(self):
        # reps>1 so one descheduled sample window on a shared box cannot
        # invert the two-point slope.
        out = E.scaling_benchmark("cross_channel", [8, 16], reps=3)
        assert out["loglog_slope"] > 0
        assert len(out["median_seconds"]) == 2

    def test_unknown_component(self):
        with pytest.raises(ValueError):
            E.scaling_benchmark("quantum", [2, 4])
