"""Tests for trace analytics."""

from __future__ import annotations

import json

import numpy as np
import pytest

from lcnet.analytics import (
    ActivationMatrix,
    block_execution_rates,
    channel_activation_matrix,
    channel_activation_rates,
    extreme_instances,
    load_traces_json,
    save_traces_json,
    write_extremes_csv,
    write_traces_csv,
)
from lcnet.const import LayerSelector, Placement
from lcnet.cost_model import FlopsReport
from lcnet.errors import DataError, TraceError
from lcnet.network import ExecutionTrace


def _trace(instance_id, label, block_scores, channel_scores):
    """Trace built from explicit saliences, one entry per block."""
    return ExecutionTrace.from_dict(
        {
            "instance_id": instance_id,
            "label": label,
            "prediction": label,
            "blocks": [
                {
                    "block_index": index,
                    "input_hw": [4, 4],
                    "block_salience": block,
                    "channel_salience": channels,
                }
                for index, (block, channels) in enumerate(
                    zip(block_scores, channel_scores, strict=True)
                )
            ],
        }
    )


@pytest.fixture
def traces():
    """Four instances of two classes over two blocks of three channels."""
    return [
        _trace(0, 0, [0.5, 0.0], [[1.0, 0.0, 0.2], [0.0, 0.0, 0.0]]),
        _trace(1, 0, [0.9, 0.3], [[0.0, 0.0, 0.7], [0.1, 0.0, 0.0]]),
        _trace(2, 1, [0.0, 0.3], [[0.4, 0.4, 0.4], [0.1, 0.2, 0.0]]),
        _trace(3, 1, [0.2, 1.0], [[0.0, 0.0, 0.0], [0.0, 0.0, 0.5]]),
    ]


def _report(totals, labels=None):
    """Report whose per-instance totals are all in one block column."""
    n = len(totals)
    zeros = np.zeros(n, dtype=np.int64)
    return FlopsReport(
        placement=Placement.SEQUENTIAL,
        instance_ids=np.arange(n, dtype=np.int64),
        labels=np.asarray(labels if labels is not None else zeros, dtype=np.int64),
        predictions=zeros,
        per_block=np.asarray(totals, dtype=np.int64).reshape(n, 1),
        stem=zeros,
        gate=zeros,
        classifier=zeros,
    )


class TestActivationMatrix:
    """Test per-class channel activation percentages."""

    def test_percentages(self, traces):
        """Test each entry is the share of the class's instances with S_C > 0."""
        matrix = channel_activation_matrix(traces, 0, ["cat", "dog"])
        np.testing.assert_allclose(matrix.percentages, [[50.0, 0.0, 100.0], [50.0, 50.0, 50.0]])
        assert matrix.instance_counts == (2, 2)
        assert matrix.channels == (0, 1, 2)
        assert matrix.layer == LayerSelector.SECOND_LAYER_INPUT

    def test_max_channels_and_layer(self, traces):
        """Test truncation to the first channels and the layer label."""
        matrix = channel_activation_matrix(
            traces, 1, ["cat", "dog"], LayerSelector.FIRST_LAYER_OUTPUT, max_channels=2
        )
        np.testing.assert_allclose(matrix.percentages, [[50.0, 0.0], [50.0, 50.0]])
        assert matrix.layer == LayerSelector.FIRST_LAYER_OUTPUT

    def test_explicit_labels(self, traces):
        """Test labels can be supplied separately from the traces."""
        matrix = channel_activation_matrix(traces, 0, ["a", "b"], labels=[1, 1, 0, 0])
        np.testing.assert_allclose(matrix.percentages[1], [50.0, 0.0, 100.0])

    def test_csv(self, traces, tmp_path):
        """Test the CSV layout and reading it back."""
        matrix = channel_activation_matrix(traces, 0, ["cat", "dog"])
        path = matrix.write_csv(tmp_path / "matrix.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "class,0,1,2"
        assert lines[1] == "cat,50.0,0.0,100.0"
        loaded = ActivationMatrix.read_csv(path, 0, LayerSelector.SECOND_LAYER_INPUT)
        np.testing.assert_array_equal(loaded.percentages, matrix.percentages)
        assert loaded.class_names == ("cat", "dog")

    def test_errors(self, traces):
        """Test empty input, a bad block index, misaligned labels and empty classes."""
        with pytest.raises(TraceError):
            channel_activation_matrix([], 0, ["a"])
        with pytest.raises(TraceError):
            channel_activation_matrix(traces, 2, ["a", "b"])
        with pytest.raises(TraceError):
            channel_activation_matrix(traces, 0, ["a", "b"], labels=[0, 1])
        with pytest.raises(DataError, match="bird"):
            channel_activation_matrix(traces, 0, ["cat", "dog", "bird"])


class TestExtremes:
    """Test lowest and highest cost instances."""

    def test_ranked_with_id_ties(self):
        """Test ties are broken by ascending instance id."""
        report = _report([30, 10, 20, 10, 30], labels=[0, 1, 2, 3, 4])
        lowest, highest = extreme_instances(report, 2)
        assert [(r.rank, r.instance_id, r.flops) for r in lowest] == [(1, 1, 10), (2, 3, 10)]
        assert [(r.instance_id, r.label) for r in highest] == [(0, 0), (4, 4)]

    @pytest.mark.parametrize("k", [0, 6])
    def test_k_range(self, k):
        """Test k must lie in [1, N]."""
        with pytest.raises(ValueError):
            extreme_instances(_report([1, 2, 3, 4, 5]), k)

    def test_csv(self, tmp_path):
        """Test the extremes CSV rows."""
        lowest, highest = extreme_instances(_report([5, 7, 6]), 1)
        path = write_extremes_csv(lowest, highest, tmp_path / "extremes.csv")
        assert path.read_text().splitlines() == [
            "group,rank,instance_id,label,flops",
            "lowest,1,0,0,5",
            "highest,1,1,0,7",
        ]


class TestRates:
    """Test gate usage rates."""

    def test_block_execution_rates(self, traces):
        """Test the share of instances executing each block."""
        assert block_execution_rates(traces) == [0.75, 0.75]
        assert block_execution_rates([]) == []

    def test_channel_activation_rates(self, traces):
        """Test the mean share of active channels per block."""
        rates = channel_activation_rates(traces)
        assert rates == pytest.approx([6 / 12, 4 / 12])


class TestTraceFiles:
    """Test trace persistence."""

    def test_json(self, traces, tmp_path):
        """Test traces and metadata survive a save and load."""
        path = save_traces_json(traces, tmp_path / "traces.json", {"class_names": ["a", "b"]})
        loaded, metadata = load_traces_json(path)
        assert metadata == {"class_names": ["a", "b"]}
        assert [t.to_dict() for t in loaded] == [t.to_dict() for t in traces]

    def test_json_version(self, traces, tmp_path):
        """Test an unknown file version is rejected."""
        path = save_traces_json(traces, tmp_path / "traces.json")
        document = json.loads(path.read_text())
        document["version"] = 7
        path.write_text(json.dumps(document))
        with pytest.raises(TraceError, match="version 7"):
            load_traces_json(path)

    @pytest.mark.parametrize(
        ("content", "match"),
        [
            ("{oops", "not a JSON document"),
            ("[1, 2]", "expected a JSON object"),
            ('{"version": 1}', "missing trace list"),
            ('{"version": 1, "traces": [{"label": 0}]}', "malformed trace entry"),
            ('{"version": 1, "traces": [3]}', "malformed trace entry"),
        ],
    )
    def test_malformed_file(self, tmp_path, content, match):
        """Test broken trace files raise TraceError."""
        path = tmp_path / "traces.json"
        path.write_text(content)
        with pytest.raises(TraceError, match=match):
            load_traces_json(path)

    def test_missing_file(self, tmp_path):
        """Test a missing trace file raises TraceError."""
        with pytest.raises(TraceError):
            load_traces_json(tmp_path / "nope.json")

    def test_csv(self, traces, tmp_path):
        """Test the per-instance summary table."""
        lines = write_traces_csv(traces, tmp_path / "traces.csv").read_text().splitlines()
        assert lines[0] == (
            "instance_id,label,prediction,block_0_salience,block_0_active_channels,"
            "block_1_salience,block_1_active_channels"
        )
        assert lines[1] == "0,0,0,0.5,2,0.0,0"
        assert len(lines) == 5
