import json

import numpy as np
import pandas as pd
import pytest

from utils.data_processor import DataProcessor
from utils.errors import MalformedHeader
from utils.export_handler import ExportHandler
from utils.simulator import RoundMetrics


def _metrics(rounds=3, bound=None):
    return [
        RoundMetrics(round=t, clients=(0, 2), client_bpp=(0.5 / t, 0.7 / t), mean_bpp=0.6 / t,
                     round_bytes=100 // t, cumulative_bytes=sum(100 // s for s in range(1, t + 1)),
                     accuracy=0.6 + 0.1 * t, kappa=0.8, mean_delta=50.0 / t, mean_delta_prime=40.0 / t,
                     spurious_flips=t, bound_empirical=bound, bound=bound)
        for t in range(1, rounds + 1)
    ]


class TestDataProcessor:

    def test_metrics_frame(self):
        df = DataProcessor.metrics_frame(_metrics())
        assert list(df["t"]) == [1, 2, 3]
        assert "bound" not in df.columns
        assert list(df["participants"]) == [2, 2, 2]

    def test_bound_columns_kept_when_measured(self):
        df = DataProcessor.metrics_frame(_metrics(bound=4.0))
        assert (df["bound"] == 4.0).all()

    def test_client_frame(self):
        df = DataProcessor.client_frame(_metrics(2))
        assert list(df["client"]) == [0, 2, 0, 2]
        assert df["bpp"].iloc[3] == pytest.approx(0.35)

    def test_summary(self):
        df = DataProcessor.metrics_frame(_metrics())
        summary = DataProcessor.summarize_run(df, {"probe_accuracy": 0.55})
        assert summary["rounds"] == 3
        assert summary["best_accuracy"] == pytest.approx(0.9)
        assert summary["total_bytes"] == 100 + 50 + 33
        assert summary["avg_bpp_after_first"] == pytest.approx((0.3 + 0.2) / 2)
        assert summary["probe_accuracy"] == 0.55

    def test_empty_summary(self):
        summary = DataProcessor.summarize_run(DataProcessor.metrics_frame([]), {"probe_accuracy": 0.5})
        assert summary["rounds"] == 0
        assert summary["best_accuracy"] == 0.5

    def test_trend_charts(self):
        df = DataProcessor.metrics_frame(_metrics(6))
        fig = DataProcessor.create_accuracy_chart(df, window=3)
        assert len(fig.data) == 2
        np.testing.assert_allclose(fig.data[1].y, df["accuracy"].rolling(3, min_periods=1).mean())
        assert DataProcessor.create_bitrate_chart(df).layout.yaxis.title.text == "Bits per parameter"
        assert DataProcessor.create_accuracy_chart(DataProcessor.metrics_frame([])) is None

    def test_bench_frame_sorted(self):
        rows = [{"layout": "xor", "bits_per_entry": 8}, {"layout": "fuse", "bits_per_entry": 16},
                {"layout": "fuse", "bits_per_entry": 8}]
        df = DataProcessor.bench_frame(rows)
        assert list(zip(df["layout"], df["bits_per_entry"])) == [("fuse", 8), ("fuse", 16), ("xor", 8)]


class TestExportHandler:

    @pytest.mark.parametrize("fmt,suffix", [("CSV", "csv"), ("JSON", "json"), ("Excel", "xlsx")])
    def test_frame_formats(self, tmp_path, fmt, suffix):
        df = DataProcessor.metrics_frame(_metrics())
        path = ExportHandler.export_frame(df, str(tmp_path / "nested" / f"metrics.{suffix}"), fmt)
        if fmt == "CSV":
            restored = pd.read_csv(path)
        elif fmt == "JSON":
            restored = pd.read_json(path, orient="records")
        else:
            restored = pd.read_excel(path, sheet_name="metrics")
        assert list(restored["t"]) == [1, 2, 3]

    def test_chart_html(self, tmp_path):
        fig = DataProcessor.create_bitrate_chart(DataProcessor.metrics_frame(_metrics()))
        path = ExportHandler.export_chart(fig, str(tmp_path / "charts" / "bitrate.html"))
        with open(path) as f:
            assert "Upload bitrate" in f.read()

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError):
            ExportHandler.export_frame(pd.DataFrame(), str(tmp_path / "x.pdf"), "PDF")

    def test_json_numpy_values(self, tmp_path):
        path = ExportHandler.export_json({"a": np.int64(3), "b": np.arange(2)}, str(tmp_path / "s.json"))
        with open(path) as f:
            assert json.load(f) == {"a": 3, "b": [0, 1]}

    @pytest.mark.parametrize("length,shape", [(10_000, (100, 100)), (1, (1, 1)), (0, (1, 1)), (10, (4, 3))])
    def test_png_shape(self, length, shape):
        assert ExportHandler.png_shape(length) == shape

    @pytest.mark.parametrize("length", [0, 1, 17, 10_000])
    def test_png_round_trip(self, tmp_path, rng, length):
        payload = rng.integers(0, 256, size=length, dtype=np.uint8).tobytes()
        path = ExportHandler.export_png(payload, str(tmp_path / "update.png"))
        assert ExportHandler.import_png(path) == payload

    def test_not_a_png(self, tmp_path):
        path = tmp_path / "fake.png"
        path.write_bytes(b"not an image")
        with pytest.raises(MalformedHeader):
            ExportHandler.import_png(str(path))
