import json

import numpy as np
import pytest

from anomaly_ident import crf, hmm, lstm, modelio
from anomaly_ident.modelio import ModelFile, ModelFileError


@pytest.fixture(scope="module")
def model_files(small_dataset, small_stats):
    fp = modelio.dataset_fingerprint(small_dataset)
    params, _ = lstm.train(small_dataset[:4], small_stats, lstm.LstmConfig(epochs=3, hidden=6))
    return {
        "hmm": ModelFile("hmm", small_stats, hmm.fit_supervised(small_dataset, small_stats), {"seed": 0}, fp),
        "crf-arow": ModelFile("crf-arow", small_stats, crf.train_arow(small_dataset, small_stats, crf.ArowConfig(epochs=2)), {}, fp),
        "crf-lbfgs": ModelFile("crf-lbfgs", small_stats, crf.train_lbfgs(small_dataset, small_stats, crf.LbfgsConfig(max_iters=3)), {}, fp),
        "lstm": ModelFile("lstm", small_stats, params, {"seed": 0}, fp),
    }


@pytest.mark.parametrize("kind", modelio.MODEL_KINDS)
def test_save_load_save_identical_bytes(model_files, kind, tmp_path):
    a, b = tmp_path / "a.mdl", tmp_path / "b.mdl"
    modelio.save_model(a, model_files[kind])
    loaded = modelio.load_model(a)
    modelio.save_model(b, loaded)
    assert a.read_bytes() == b.read_bytes()
    assert loaded.kind == kind


@pytest.mark.parametrize("kind", modelio.MODEL_KINDS)
def test_loaded_model_labels_probe_identically(model_files, kind, small_dataset, tmp_path):
    path = tmp_path / "m.mdl"
    modelio.save_model(path, model_files[kind])
    probe = small_dataset[0].observations
    before = model_files[kind].labeler().label_sequence(probe)
    after = modelio.load_model(path).labeler().label_sequence(probe)
    assert list(before) == list(after)


def test_bumped_version_rejected(model_files, tmp_path):
    d = model_files["hmm"].to_dict()
    d["version"] = modelio.MODEL_FORMAT_VERSION + 1
    path = tmp_path / "v.mdl"
    path.write_text(json.dumps(d))
    with pytest.raises(ModelFileError, match="version"):
        modelio.load_model(path)


def test_corrupt_file_reports_offset(model_files, tmp_path):
    text = modelio.dumps(model_files["hmm"])
    path = tmp_path / "c.mdl"
    path.write_text(text[:100])
    with pytest.raises(ModelFileError, match="offset"):
        modelio.load_model(path)


def test_missing_and_bad_fields_named(model_files):
    d = model_files["lstm"].to_dict()
    del d["stats"]
    with pytest.raises(ModelFileError, match="stats"):
        modelio.from_dict(d)
    d = model_files["lstm"].to_dict()
    d["params"]["shapes"]["V"] = [9, 9]
    with pytest.raises(ModelFileError, match="params"):
        modelio.from_dict(d)
    d = model_files["hmm"].to_dict()
    d["kind"] = "svm"
    with pytest.raises(ModelFileError, match="kind"):
        modelio.from_dict(d)


def test_missing_file(tmp_path):
    with pytest.raises(ModelFileError):
        modelio.load_model(tmp_path / "nope.mdl")


def test_fingerprint_sensitive_to_content(small_dataset):
    a = modelio.dataset_fingerprint(small_dataset)
    assert a.startswith("sha256:") and a == modelio.dataset_fingerprint(list(small_dataset))
    assert a != modelio.dataset_fingerprint(small_dataset[1:])
