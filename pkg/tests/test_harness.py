import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from wmnet import ValidationError
from wmnet import checkpoint as ckpt_io
from wmnet.bench import DatasetSpec, write_dataset
from wmnet.cfm import CFM, CrossAttentionCore
from wmnet.config import ExperimentConfig
from wmnet.experiments import ABLATION_ROWS, ablate, ablation_configs, sweep_w, to_markdown
from wmnet.model import build_model, core_parameter_counts
from wmnet.ops import count_parameters
from wmnet.train import (
    TrainingDiverged,
    decode,
    encode_targets,
    evaluate,
    evaluate_model,
    gaussian_radius,
    load_split,
    tensorize,
    train,
)

TINY = dict(n_train=8, n_val=4, epochs=1, batch_size=4, spec="neutral")


@pytest.fixture
def tiny_cfg(tmp_path):
    return ExperimentConfig(output_dir=str(tmp_path / "run"), **TINY)


def test_head_receives_16_8_4_maps(tiny_cfg):
    model = build_model(tiny_cfg)
    fused = model.fused_features(torch.rand(2, 3, 64, 64), torch.rand(2, 1, 64, 64))
    assert [tuple(f.shape[-2:]) for f in fused[1:]] == [(16, 16), (8, 8), (4, 4)]
    out = model(torch.rand(2, 3, 64, 64), torch.rand(2, 1, 64, 64))
    assert out["heatmap"].shape == (2, 3, 16, 16)
    assert out["size"].shape == out["offset"].shape == (2, 2, 16, 16)


def test_all_flags_off_builds_add_fusion():
    cfg = ExperimentConfig(wunet=False, sawf=False, cfm=False, attention=False)
    model = build_model(cfg)
    assert model.wunet is None
    assert all(sum(p.numel() for p in maf.parameters()) == 0 for maf in model.mafs)
    out = model(torch.rand(1, 3, 64, 64), torch.rand(1, 1, 64, 64))
    assert torch.isfinite(out["heatmap"]).all()


def test_contradictory_flags():
    with pytest.raises(ValidationError):
        ExperimentConfig(sawf=True, cfm=False, attention=False)


@pytest.mark.parametrize("channels", [16, 32, 48, 64])
def test_cfm_core_is_smaller_than_attention(channels):
    n_cfm, n_att = core_parameter_counts(channels)
    assert n_cfm == count_parameters(CFM(channels))
    assert n_att == count_parameters(CrossAttentionCore(channels))
    assert n_cfm < n_att


def test_model_parameter_count_drops_with_cfm():
    with_cfm = count_parameters(build_model(ExperimentConfig(cfm=True)))
    with_att = count_parameters(build_model(ExperimentConfig(cfm=False, attention=True)))
    assert with_cfm < with_att


def test_config_text_round_trip(tmp_path):
    cfg = ExperimentConfig(wunet=False, w1=0.25, widths=(8, 16, 24, 32), seeds=(3, 4), spec="neutral")
    path = tmp_path / "cfg.txt"
    path.write_text(cfg.to_text())
    assert ExperimentConfig.load(path) == cfg
    assert ExperimentConfig.from_text("cfm = off\nattention=on # transformer core\n").core == "attention"
    assert cfg.hash() == ExperimentConfig.from_text(cfg.to_text()).hash()
    assert cfg.hash() != replace(cfg, seed=1).hash()
    with pytest.raises(ValidationError):
        ExperimentConfig.from_text("epochs=ten\n")
    with pytest.raises(ValidationError):
        ExperimentConfig.from_text("colour=blue\n")


def test_gaussian_radius_grows_with_box():
    radii = [gaussian_radius(s, s) for s in (2, 4, 8, 16)]
    assert all(r > 0 for r in radii)
    assert radii == sorted(radii)
    assert gaussian_radius(4, 8) == gaussian_radius(8, 4)


def test_targets_and_decode_round_trip():
    from wmnet.bench import DetectionSet

    gt = DetectionSet([[10, 12, 22, 20], [40, 40, 46, 52]], [1, 0], [1.0, 1.0])
    t = encode_targets(gt, 64)
    assert t["heatmap"].max() == 1.0 and t["mask"].sum() == 2
    logits = torch.from_numpy(np.where(t["heatmap"] == 1.0, 10.0, -10.0)).float()[None]
    out = {"heatmap": logits, "size": torch.from_numpy(t["size"])[None], "offset": torch.from_numpy(t["offset"])[None]}
    (pred,) = decode(out, 64)
    confident = pred.scores > 0.5
    assert confident.sum() == 2
    order = np.argsort(pred.classes[confident])[::-1]
    np.testing.assert_allclose(pred.boxes[confident][order], gt.boxes, atol=1e-4)


def test_one_epoch_smoke(tiny_cfg):
    result = train(tiny_cfg)
    assert len(result.checkpoint.history) == 1
    assert np.isfinite(result.checkpoint.history[0]["loss"])
    assert result.path.exists()
    records = [json.loads(line) for line in (result.path.parent / "metrics.jsonl").read_text().splitlines()]
    assert records[0]["kind"] == "train" and records[0]["config_hash"] == tiny_cfg.hash()


def test_loss_decreases_over_20_epochs(tmp_path):
    cfg = ExperimentConfig(output_dir=str(tmp_path), n_train=16, n_val=4, epochs=20, batch_size=8, spec="neutral")
    history = train(cfg, write=False).checkpoint.history
    assert history[-1]["loss"] < history[0]["loss"]


def test_same_seed_same_history(tiny_cfg):
    a = train(replace(tiny_cfg, epochs=2), write=False)
    b = train(replace(tiny_cfg, epochs=2), write=False)
    strip = lambda h: [{k: v for k, v in r.items() if k != "seconds"} for r in h]
    assert strip(a.checkpoint.history) == strip(b.checkpoint.history)
    for (ka, va), (kb, vb) in zip(a.checkpoint.arrays.items(), b.checkpoint.arrays.items()):
        assert ka == kb and np.array_equal(va, vb)


def test_nan_loss_dumps_batch(tiny_cfg, monkeypatch):
    import wmnet.train as train_mod

    monkeypatch.setattr(train_mod, "detection_loss", lambda out, tgt: {"loss": torch.tensor(float("nan"))})
    with pytest.raises(TrainingDiverged, match="nan_batch_step0"):
        train(tiny_cfg)
    dump = torch.load(f"{tiny_cfg.output_dir}/nan_batch_step0.pt")
    assert dump["rgb"].shape[0] == tiny_cfg.batch_size


def test_eval_checkpoint_round_trip(tiny_cfg):
    result = train(tiny_cfg)
    log_path = result.path.parent / "metrics.jsonl"
    first = evaluate(result.path, "val", log_path=log_path)
    second = evaluate(result.path, "val", log_path=log_path)
    assert first == second
    assert set(first) >= {"mAP@0.5", "mAP", "per_class", "config_hash"}
    evals = [json.loads(l) for l in log_path.read_text().splitlines() if '"eval"' in l]
    assert len(evals) == 2 and evals[0]["config_hash"] == tiny_cfg.hash()
    in_memory = evaluate(result.checkpoint, "val")
    assert in_memory == first
    live = evaluate_model(result.model, tensorize(load_split(tiny_cfg, "val")))
    assert live["mAP@0.5"] == first["mAP@0.5"] and live["per_class"] == first["per_class"]


def test_checkpoint_bitwise_round_trip(tiny_cfg, tmp_path):
    result = train(tiny_cfg, write=False)
    path = tmp_path / "a.wmck"
    ckpt_io.save(result.checkpoint, path)
    loaded = ckpt_io.load(path)
    assert loaded.config_text == tiny_cfg.to_text()
    assert loaded.history == result.checkpoint.history
    assert list(loaded.arrays) == list(result.checkpoint.arrays)
    for name, value in result.checkpoint.arrays.items():
        assert loaded.arrays[name].tobytes() == value.tobytes()
    again = tmp_path / "b.wmck"
    ckpt_io.save(loaded, again)
    assert path.read_bytes() == again.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.wmck"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ckpt_io.CheckpointError):
        ckpt_io.load(bad)
    good = tmp_path / "good.wmck"
    ckpt_io.save(ckpt_io.Checkpoint("a=1\n", {"w": np.ones((2, 3), np.float32)}, []), good)
    good_bytes = good.read_bytes()
    (tmp_path / "cut.wmck").write_bytes(good_bytes[:-4])
    with pytest.raises(ckpt_io.CheckpointError):
        ckpt_io.load(tmp_path / "cut.wmck")


def test_oracle_hook_scores_one(tiny_cfg):
    result = train(tiny_cfg, write=False)
    metrics = evaluate(result.checkpoint, "val", oracle=True)
    assert metrics["mAP@0.5"] == 1.0 and metrics["mAP"] == 1.0


def test_empty_split_is_an_error(tmp_path):
    write_dataset(DatasetSpec(n_train=2, n_val=0, canvas=64), tmp_path / "data")
    cfg = ExperimentConfig(data_dir=str(tmp_path / "data"), output_dir=str(tmp_path / "run"), epochs=1, batch_size=2)
    result = train(cfg, write=False)
    with pytest.raises(ValidationError):
        evaluate(result.checkpoint, "val")
    with pytest.raises(ValidationError):
        tensorize([])


def test_missing_split_is_an_error(tmp_path):
    write_dataset(DatasetSpec(n_train=2, n_val=1, canvas=64), tmp_path / "data")
    cfg = ExperimentConfig(data_dir=str(tmp_path / "data"), output_dir=str(tmp_path / "run"), epochs=1, batch_size=2)
    result = train(cfg, write=False)
    with pytest.raises(ValidationError):
        evaluate(result.checkpoint, "test")
    (tmp_path / "data" / "val" / "annotations.jsonl").unlink()
    with pytest.raises(ValidationError):
        evaluate(result.checkpoint, "val")


def fake_runner(cfg):
    return {"mAP@0.5": 0.5 + 0.1 * cfg.sawf + 0.01 * cfg.seed, "mAP": 0.3, "final_loss": 1.0}


def test_ablation_table_structure(tmp_path):
    cfg = ExperimentConfig(output_dir=str(tmp_path), seeds=(0, 1))
    table = ablate(cfg, runner=fake_runner)
    rows = table["rows"]
    assert len(rows) == 7
    assert [(r["wunet"], r["sawf"], r["cfm"]) for r in rows] == list(ABLATION_ROWS)
    assert [r["row"] for r in rows] == ["---", "--C", "W--", "W-C", "-SC", "-S-", "WSC"]
    assert rows[0]["mAP@0.5"] == pytest.approx(0.505)
    assert table["config_hash"] == cfg.hash()
    for name in ("ablation.json", "ablation.md", "ablation.png"):
        assert (tmp_path / name).exists()
    md = (tmp_path / "ablation.md").read_text()
    assert cfg.hash() in md and md.count("\n| ") == 8
    assert json.loads((tmp_path / "ablation.json").read_text())["config_hash"] == cfg.hash()


def test_ablation_rows_use_transformer_without_cfm():
    for c in ablation_configs(ExperimentConfig()):
        assert c.core == ("cfm" if c.cfm else "attention")


def test_sweep_table_structure(tmp_path):
    cfg = ExperimentConfig(output_dir=str(tmp_path), seeds=(0,))
    table = sweep_w(cfg, runner=fake_runner)
    assert len(table["rows"]) == 10
    assert [(r["w2"], r["w1"]) for r in table["rows"]] == [
        (w2, w1) for w2 in (1.0, 0.5) for w1 in (1.0, 0.75, 0.5, 0.25, 0.1)
    ]
    assert "| w2 | w1 |" in to_markdown(table, ["w2", "w1"])
    assert (tmp_path / "sweep_w.png").exists()
