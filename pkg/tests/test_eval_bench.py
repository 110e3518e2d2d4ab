import dataclasses

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from defense_prefix.attack_forge import ImageRecord, read_manifest
from defense_prefix.errors import ConfigError, ManifestError
from defense_prefix.eval_bench import (AblationResult, BenchData, EvalReport, ablate, average_accuracy,
                                       eval_classification, read_reports, reports_csv,
                                       run_attack_eval, summary_table, write_reports)
from defense_prefix.prefix_core import DefensePrefixVector, TrainingConfig, train_dp
from defense_prefix.toybench import build_classification_bench

PHOTO = "a photo of a <CLS>."
FAST = TrainingConfig(epochs=2, batch_size=16, seed=3)


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    return build_classification_bench(tmp_path_factory.mktemp("evalbench"), 30, 3, seed=11)


@pytest.fixture(scope="module")
def data(toy16, bench):
    return BenchData.from_manifests(toy16, bench.classes, bench.clean_manifest, bench.attack_manifest,
                                    bench.clean_manifest, bench.attack_manifest)


def native_accuracy(h, manifest, names):
    """Independent zero-shot accuracy from the tokenizer-facing encoder."""
    recs = list(read_manifest(manifest))
    from defense_prefix.attack_forge import load_image, preprocess_image

    x = h.encode_images([preprocess_image(load_image(r.image)) for r in recs])
    w = torch.stack([h.encode_text(PHOTO.replace("<CLS>", n)) for n in names])
    sims = F.normalize(x, dim=-1) @ F.normalize(w, dim=-1).T
    y = torch.tensor([r.true_class for r in recs])
    return float((sims.argmax(-1) == y).double().mean())


def test_no_prefix_matches_native(toy16, bench):
    r = eval_classification(toy16, bench.attack_manifest, bench.classes, PHOTO)
    assert r.condition == "baseline" and r.dp_digest == ""
    assert r.accuracy == pytest.approx(native_accuracy(toy16, bench.attack_manifest, bench.classes))
    assert r.n_images == 30 and sum(r.per_class_counts) == 30


def test_empty_manifest(toy16, bench):
    with pytest.raises(ManifestError, match="no images"):
        eval_classification(toy16, [], bench.classes)


def test_label_out_of_range(toy16, bench):
    rec = list(read_manifest(bench.clean_manifest))[0]
    with pytest.raises(ManifestError, match="out of range"):
        eval_classification(toy16, [dataclasses.replace(rec, true_class=7)], bench.classes)


def test_baseline_ignores_prefix(toy16, bench):
    poisoned = DefensePrefixVector(torch.full((1, 16), float("nan")), "toy-16")
    a = eval_classification(toy16, bench.clean_manifest, bench.classes, PHOTO, poisoned, baseline=True)
    b = eval_classification(toy16, bench.clean_manifest, bench.classes, PHOTO)
    assert a == b


def test_attack_eval_deterministic(toy16, bench, tmp_path):
    dp = DefensePrefixVector(torch.zeros(1, 16), "toy-16")
    clean = read_manifest(bench.clean_manifest)
    one = run_attack_eval(toy16, clean, bench.classes, PHOTO, dp, seed=4)
    two = run_attack_eval(toy16, clean, bench.classes, PHOTO, dp, seed=4, out_dir=tmp_path)
    assert [r.accuracy for r in one.reports()] == [r.accuracy for r in two.reports()]
    assert one.baseline[1].data_digest == two.baseline[1].data_digest
    # An all-zero prefix is still a well-formed condition.
    assert one.dp[0].condition == "dp" and 0 <= one.dp[0].accuracy <= 1
    assert one.attacked_delta == one.dp[1].accuracy - one.baseline[1].accuracy
    assert two.attack_manifest == tmp_path


class TestAblate:
    def test_empty_values(self, toy16, data):
        with pytest.raises(ConfigError):
            ablate(toy16, data, FAST, "lambda", [])

    def test_unknown_axis(self, toy16, data):
        with pytest.raises(ConfigError, match="axis"):
            ablate(toy16, data, FAST, "temperature", [1])

    def test_single_token_equals_plain_run(self, toy16, data):
        res = ablate(toy16, data, FAST, "tokens", [1], PHOTO)
        plain = train_dp(toy16, None, None, data.class_names, FAST, features=data.train)
        assert torch.equal(res.rows[0].dp.values, plain.values)

    def test_rows_and_output(self, toy16, data):
        res = ablate(toy16, data, FAST, "lambda", ["0", "3"], PHOTO)
        assert isinstance(res, AblationResult)
        assert [r.value for r in res.rows] == [0.0, 3.0]
        assert len(res.table().splitlines()) == 2 + 1 + 2
        assert res.csv().splitlines()[0] == "lambda,clean_accuracy,attacked_accuracy"
        assert res.rows[0].clean.config_digest != res.rows[1].clean.config_digest


def _report(dataset, n, correct, condition="dp"):
    return EvalReport(dataset, n, 2, PHOTO, condition, correct / n, correct, [None, None], [n, 0])


def test_averages():
    reports = [_report("a", 10, 5), _report("b", 30, 30)]
    avg = average_accuracy(reports)
    assert avg["macro"] == pytest.approx(0.75)
    assert avg["micro"] == pytest.approx(35 / 40)
    with pytest.raises(ValueError):
        average_accuracy([])
    assert "average (macro)" in summary_table(reports)


def test_report_roundtrip(tmp_path):
    reports = [_report("a", 10, 5), _report("b", 4, 1, "baseline")]
    write_reports(reports, tmp_path / "r.jsonl")
    assert read_reports(tmp_path / "r.jsonl") == reports
    rows = reports_csv(reports).splitlines()
    assert len(rows) == 3 and rows[1].startswith("a,classify,dp,10,5,0.5")
