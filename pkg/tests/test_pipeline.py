import json
import shutil

import numpy as np
import pytest

from mixopt.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, main
from mixopt.dataset import generate_synthetic_suite, save_dataset
from mixopt.exceptions import DataValidationError, HashMismatchError
from mixopt.pipeline import PipelineConfig, preprocess_hash, run_pipeline
from mixopt.preprocess import load_norm_stats

pytestmark = pytest.mark.filterwarnings("ignore::RuntimeWarning")

TINY_TRAIN = {"total_steps": 40, "eval_interval": 20, "batch_size": 32, "lr": 1e-3, "hidden": [16]}


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    save_dataset(generate_synthetic_suite("operator_tiers", seed=0, sizes=6, horizon=10), root)
    return root


def tiny_config(data, out, **kw):
    obj = {"data": str(data), "out_dir": str(out), "n_bins": 16, "train": TINY_TRAIN,
           "dro": {"per_domain_batch": 4}, "subset_fraction": 0.5, **kw}
    return PipelineConfig.from_json(obj)


def test_end_to_end_outputs(tiny_data, tmp_path):
    res = run_pipeline(tiny_config(tiny_data, tmp_path / "run"))
    out = tmp_path / "run"
    weights = json.loads((out / "weights.json").read_text())
    assert list(weights) == res.names and abs(sum(weights.values()) - 1) <= 1e-12
    run = json.loads((out / "run.json").read_text())
    assert run["selected_step"] == res.selected_step == res.dro_steps
    assert run["config"]["train"]["hidden"] == [16] and run["config"]["dro"]["eta"] == 0.1
    for stage in ("preprocess", "reference", "dro"):
        assert json.loads((out / stage / "stage.json").read_text())["config_hash"] == res.config_hash
    assert json.loads((out / "subset" / "retention_plan.json").read_text())["config_hash"] == res.config_hash
    assert json.loads((out / "report" / "export.json").read_text())["config_hash"] == res.config_hash
    assert (out / "dro" / "alpha_trace.csv").is_file() and (out / "report" / "weights_table.txt").is_file()


def test_each_domain_normalized_with_its_own_stats(tiny_data, tmp_path):
    from mixopt.dataset import load_manifest, split_domains, SplitSpec
    from mixopt.preprocess import fit_normalizer

    res = run_pipeline(tiny_config(tiny_data, tmp_path / "run"))
    saved = load_norm_stats(tmp_path / "run" / "preprocess" / "norm_stats.json")
    _, domains = load_manifest(tiny_data)
    train, _ = split_domains(domains, SplitSpec(0.05, 0))
    for d in train:
        own = fit_normalizer(d, "gaussian")
        np.testing.assert_array_equal(saved[d.name].mean, own.mean)
        np.testing.assert_array_equal(saved[d.name].std, own.std)
    assert list(saved) == res.names


def test_determinism(tiny_data, tmp_path):
    for name in ("a", "b"):
        run_pipeline(tiny_config(tiny_data, tmp_path / name))
    for f in ("weights.json", "subset/retention_plan.json", "dro/alpha_trace.csv", "run.json"):
        if f == "run.json":
            a = json.loads((tmp_path / "a" / f).read_text())
            b = json.loads((tmp_path / "b" / f).read_text())
            a["config"].pop("out_dir"), b["config"].pop("out_dir")
            assert a == b
        else:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_resume_after_reference_stage(tiny_data, tmp_path):
    run_pipeline(tiny_config(tiny_data, tmp_path / "full"))
    cfg = tiny_config(tiny_data, tmp_path / "resumed")
    run_pipeline(cfg)
    # simulate a run killed after train-ref: drop everything downstream
    for p in ("dro", "subset", "report", "weights.json", "run.json"):
        target = tmp_path / "resumed" / p
        shutil.rmtree(target) if target.is_dir() else target.unlink()
    ckpts = sorted((tmp_path / "resumed" / "reference" / "checkpoints").iterdir())
    mtimes = [c.stat().st_mtime_ns for c in ckpts]
    run_pipeline(cfg)
    assert [c.stat().st_mtime_ns for c in ckpts] == mtimes  # reference was reused, not retrained
    for f in ("weights.json", "subset/retention_plan.json", "dro/alpha_trace.csv"):
        assert (tmp_path / "full" / f).read_bytes() == (tmp_path / "resumed" / f).read_bytes()


def test_stage_hash_mismatch_is_an_error(tiny_data, tmp_path):
    run_pipeline(tiny_config(tiny_data, tmp_path / "run"))
    with pytest.raises(HashMismatchError):
        run_pipeline(tiny_config(tiny_data, tmp_path / "run", n_bins=8))


def test_preprocess_hash_sensitivity():
    base = preprocess_hash("gaussian", 256, 5.0, 0.05, 0, "d")
    assert base == preprocess_hash("gaussian", 256, 5.0, 0.05, 0, "d")
    others = [
        preprocess_hash("bounds", 256, 5.0, 0.05, 0, "d"),
        preprocess_hash("gaussian", 128, 5.0, 0.05, 0, "d"),
        preprocess_hash("gaussian", 256, 4.0, 0.05, 0, "d"),
        preprocess_hash("gaussian", 256, 5.0, 0.10, 0, "d"),
        preprocess_hash("gaussian", 256, 5.0, 0.05, 1, "d"),
        preprocess_hash("gaussian", 256, 5.0, 0.05, 0, "e"),
    ]
    assert len({base, *others}) == 7


def test_config_validation(tmp_path):
    with pytest.raises(DataValidationError):
        PipelineConfig.from_json({"data": "x"})
    with pytest.raises(DataValidationError):
        PipelineConfig.from_json({"data": "x", "out_dir": "y", "bogus": 1})
    with pytest.raises(DataValidationError):
        PipelineConfig.from_json({"data": "x", "out_dir": "y", "dro": {"total_steps": 5}})
    with pytest.raises(DataValidationError):
        PipelineConfig.from_json({"data": "x", "out_dir": "y", "scheme": "minmax"})
    with pytest.raises(DataValidationError):
        PipelineConfig.from_json({"data": "x", "out_dir": "y", "train": {"bogus": 1}})
    cfg = PipelineConfig.from_json({"data": "x", "out_dir": "y", "seed": 4, "train": {"hidden": [8]}})
    assert cfg.train.seed == cfg.dro.seed == 4 and cfg.dro.hidden == (8,)
    assert PipelineConfig.from_json(cfg.to_json()) == cfg


# ---------------------------------------------------------------------- CLI


def test_cli_stage_by_stage(tmp_path, capsys):
    d = tmp_path / "data"
    assert main(["gen", "--kind", "noise_pair", "--seed", "1", "--out", str(d), "--sizes", "8", "--horizon", "10"]) == EXIT_OK
    assert (d / "manifest.json").is_file()
    common = ["--bins", "16"]
    ref = tmp_path / "ref"
    assert main(["train-ref", "--data", str(d), "--out", str(ref), "--steps", "20", "--hidden", "16",
                 "--lr", "1e-3", "--batch-size", "32", *common]) == EXIT_OK
    assert (ref / "records.csv").read_text().startswith("step,domain,train_loss,val_loss")
    dro = tmp_path / "dro"
    assert main(["dro", "--data", str(d), "--ref", str(ref), "--out", str(dro), "--eta", "0.1",
                 "--smoothing", "1e-3", "--steps", "5", "--seed", "0", *common]) == EXIT_OK
    assert (dro / "alpha_trace.csv").read_text().startswith("step,domain,alpha,excess_loss")
    weights = json.loads((dro / "weights.json").read_text())
    assert list(weights) == ["learnable", "noise"]
    sub = tmp_path / "sub"
    assert main(["subset", "--data", str(d), "--weights", str(dro / "weights.json"), "--fraction", "0.25",
                 "--seed", "0", "--out", str(sub)]) == EXIT_OK
    plan = json.loads((sub / "retention_plan.json").read_text())
    assert sum(plan["retained"]) == plan["target"] == 40
    (tmp_path / "uni.json").write_text(json.dumps({"learnable": 0.5, "noise": 0.5}))
    rep = tmp_path / "rep"
    assert main(["report", "--weights", str(tmp_path / "uni.json"), str(dro / "weights.json"),
                 "--names", "uniform", "dro", "--out", str(rep)]) == EXIT_OK
    assert (rep / "weights_table.csv").read_text().startswith("method,domain,percent,mark")


def test_cli_dro_against_reference_with_other_bins(tmp_path):
    d = tmp_path / "data"
    main(["gen", "--kind", "noise_pair", "--out", str(d), "--sizes", "6", "--horizon", "10"])
    ref = tmp_path / "ref"
    main(["train-ref", "--data", str(d), "--out", str(ref), "--steps", "10", "--hidden", "8", "--bins", "16"])
    code = main(["dro", "--data", str(d), "--ref", str(ref), "--out", str(tmp_path / "dro"), "--bins", "32"])
    assert code == EXIT_VALIDATION


def test_cli_run_and_exit_codes(tiny_data, tmp_path, capsys):
    cfg = {"data": str(tiny_data), "out_dir": "out", "n_bins": 16, "train": TINY_TRAIN}
    (tmp_path / "pipeline.json").write_text(json.dumps(cfg))
    assert main(["run", "--config", str(tmp_path / "pipeline.json"), "--dro-steps", "3"]) == EXIT_OK
    run = json.loads((tmp_path / "out" / "run.json").read_text())
    assert run["dro_steps"] == 3
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == EXIT_VALIDATION
    (tmp_path / "broken.json").write_text("{")
    assert main(["run", "--config", str(tmp_path / "broken.json")]) == EXIT_VALIDATION
    assert main(["bogus-command"]) == EXIT_VALIDATION
    assert main(["gen", "--kind", "noise_pair", "--out", str(tmp_path / "x"), "--sizes", "1", "2", "3"]) == EXIT_VALIDATION


def test_cli_numerical_failure_exit_code(tiny_data, tmp_path):
    cfg = {"data": str(tiny_data), "out_dir": "out", "n_bins": 16,
           "train": {**TINY_TRAIN, "lr": 1e300}}
    (tmp_path / "pipeline.json").write_text(json.dumps(cfg))
    assert main(["run", "--config", str(tmp_path / "pipeline.json")]) == EXIT_NUMERICAL
