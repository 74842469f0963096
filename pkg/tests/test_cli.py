import math
import statistics

import numpy as np
import pytest

from ignoreattn import autograd, cam, checkpoint, cli
from ignoreattn.data import load_cifar10_binary, normalize

TINY = ["dataset=synth", "synth_n=120", "n_val=40", "stem_channels=8", "stages=1:8:1,1:8:2",
        "epochs=2", "milestones=1", "batch_size=40", "lr0=0.05", "aug_pad=0"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def train(tmp_path, capsys, name, *extra):
    out = tmp_path / name
    args = ["train"]
    for item in TINY + [f"out_dir={out}", *extra]:
        args += ["--set", item]
    code, stdout, err = run(capsys, *args)
    assert code == 0, err
    return out


def test_metrics_schema_and_determinism(tmp_path, capsys):
    a = train(tmp_path, capsys, "a", "attention=cbam-ign2")
    b = train(tmp_path, capsys, "b", "attention=cbam-ign2")
    text = (a / "seed_0" / "metrics.csv").read_text()
    assert text.splitlines()[0] == "epoch,lr,train_loss,val_loss,val_top1,val_top5"
    assert len(text.splitlines()) == 3
    assert text == (b / "seed_0" / "metrics.csv").read_text()
    ca, cb = (checkpoint.load(d / "seed_0" / "best.ckpt") for d in (a, b))
    assert ca.params.keys() == cb.params.keys()
    assert all(np.array_equal(ca.params[k], cb.params[k]) for k in ca.params)
    assert all(np.array_equal(ca.velocities[k], cb.velocities[k]) for k in ca.velocities)


def test_alpha_zero_matches_none_through_training(tmp_path, capsys):
    a = train(tmp_path, capsys, "ign", "attention=se-ign1:alpha=0")
    b = train(tmp_path, capsys, "none", "attention=none")
    assert (a / "seed_0" / "metrics.csv").read_bytes() == (b / "seed_0" / "metrics.csv").read_bytes()


def test_three_seed_summary(tmp_path, capsys):
    out = train(tmp_path, capsys, "s", "attention=se", "seeds=0,1,2")
    rows = cli.read_csv(out / "summary.csv")
    assert [r["row"] for r in rows] == ["seed_0", "seed_1", "seed_2", "mean", "std"]
    best = []
    for s in range(3):
        recs = cli.read_csv(out / f"seed_{s}" / "metrics.csv")
        best.append(min(float(r["val_top1"]) for r in recs))
    assert [float(r["val_top1"]) for r in rows[:3]] == best
    assert float(rows[3]["val_top1"]) == pytest.approx(statistics.fmean(best))
    assert float(rows[4]["val_top1"]) == pytest.approx(statistics.stdev(best))


def test_single_seed_std_is_nan(tmp_path, capsys):
    out = train(tmp_path, capsys, "one")
    assert math.isnan(float(cli.read_csv(out / "summary.csv")[-1]["val_top1"]))


def test_eval_matches_recorded_best_and_is_pure(tmp_path, capsys):
    out = train(tmp_path, capsys, "e", "attention=cbam-ign1:alpha=0.8")
    ckpt = out / "seed_0" / "best.ckpt"
    raw = ckpt.read_bytes()
    code, first, _ = run(capsys, "eval", str(ckpt), "--out", str(tmp_path / "m.csv"))
    code2, second, _ = run(capsys, "eval", str(ckpt))
    assert code == code2 == 0 and first == second
    assert ckpt.read_bytes() == raw
    row = cli.read_csv(tmp_path / "m.csv")[0]
    recs = cli.read_csv(out / "seed_0" / "metrics.csv")
    best = min(recs, key=lambda r: float(r["val_top1"]))
    assert float(row["top1"]) == float(best["val_top1"])
    assert float(row["loss"]) == float(best["val_loss"])
    assert run(capsys, "eval", str(ckpt), "--split", "test")[0] == 0


def test_eval_memorized_batch(tmp_path, capsys):
    from ignoreattn.data import AugmentConfig, SyntheticSpec, synth_generate, write_cifar_binary
    from ignoreattn.models import Model, ModelConfig, Stage
    from ignoreattn.train import TrainConfig, fit
    from ignoreattn.attention import AttentionMode

    batch = synth_generate(SyntheticSpec(n=8, seed=3))
    model = Model(ModelConfig(stages=(Stage(1, 8, 2),), attention=AttentionMode.parse("se"),
                              num_classes=2, stem_channels=8), 0)
    norm = batch.norm_stats()
    fit(model, batch, batch, TrainConfig(lr0=0.05, epochs=100, batch_size=8, milestones=(), weight_decay=0),
        AugmentConfig(pad=0, hflip_prob=0), norm)
    ckpt = tmp_path / "mem.ckpt"
    checkpoint.save(ckpt, checkpoint.from_model(model, norm=norm))
    images = tmp_path / "batch.bin"
    write_cifar_binary(images, batch)
    code, text, _ = run(capsys, "eval", str(ckpt), "--files", str(images))
    assert code == 0 and "top1=0.00" in text


def test_eval_incompatible(tmp_path, capsys):
    out = train(tmp_path, capsys, "inc")
    bad = tmp_path / "c100.bin"
    bad.write_bytes(bytes([7]) + bytes(3072))
    assert run(capsys, "eval", str(out / "seed_0" / "best.ckpt"), "--files", str(bad))[0] == 5
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint")
    assert run(capsys, "eval", str(junk))[0] == 5


def test_exit_codes(tmp_path, capsys):
    assert run(capsys, "train", "--set", "bogus=1")[0] == 2
    assert run(capsys, "train", "--set", "dataset=cifar10")[0] == 3
    assert run(capsys, "train", "--set", "dataset=cifar10", "--set",
               f"train_files={tmp_path / 'none.bin'}")[0] == 3
    assert run(capsys, "synth", "--out", str(tmp_path / "s.bin"), "--set", "synth_hw=24",
               "--set", "synth_border=3")[0] == 2
    assert run(capsys, "gradcheck", "--scope", "nonsense")[0] == 2


def test_numeric_failure_exit_code(tmp_path, capsys, monkeypatch):
    from ignoreattn import train as train_mod
    from ignoreattn.errors import NumericError

    def broken(*a, **k):
        raise NumericError("non-finite gradient for head.weight")
    monkeypatch.setattr(train_mod, "sgd_step", broken)
    args = ["train"] + [x for item in TINY + [f"out_dir={tmp_path / 'n'}"] for x in ("--set", item)]
    code, _, err = run(capsys, *args)
    assert code == 4 and "diverged" in err


def test_gradcheck_scope_and_fault(capsys, monkeypatch):
    code, text, _ = run(capsys, "gradcheck", "--scope", "sigmoid,se-ign3", "--trials", "2")
    assert code == 0
    lines = [ln for ln in text.splitlines() if ln.split()[0] in ("sigmoid", "se-ign3")]
    assert len(lines) == 2 and all(ln.endswith("ok") for ln in lines)
    good = autograd.backward_rule("mul")
    monkeypatch.setitem(autograd._RULES, "mul", lambda g, a, b: tuple(
        None if x is None else x * 0.9 for x in good(g, a, b)))
    code, text, _ = run(capsys, "gradcheck", "--scope", "mul", "--trials", "2")
    assert code == 4 and "FAIL" in text


def test_gradcheck_primitives_scope(capsys):
    code, text, _ = run(capsys, "gradcheck", "--scope", "primitives", "--trials", "1")
    assert code == 0 and "23/23 passed" in text


def test_synth_and_cam(tmp_path, capsys):
    out = train(tmp_path, capsys, "c", "attention=cbam-ign1")
    images = tmp_path / "imgs.bin"
    assert run(capsys, "synth", "--out", str(images), "--set", "synth_n=3", "--seed", "5")[0] == 0
    data = load_cifar10_binary([images])
    assert len(data) == 3
    ckpt = out / "seed_0" / "best.ckpt"
    assert run(capsys, "cam", str(ckpt), str(images), "--out", str(tmp_path / "cam1"))[0] == 0
    assert run(capsys, "cam", str(ckpt), str(images), "--out", str(tmp_path / "cam2"))[0] == 0
    files = sorted(p.name for p in (tmp_path / "cam1").iterdir())
    assert len([f for f in files if f.endswith((".pgm", ".ppm"))]) == 6 and "regions.csv" in files
    for f in files:
        assert (tmp_path / "cam1" / f).read_bytes() == (tmp_path / "cam2" / f).read_bytes()

    ck = checkpoint.load(ckpt)
    model = ck.build_model()
    rows = cli.read_csv(tmp_path / "cam1" / "regions.csv")
    for i, row in enumerate(rows):
        x = normalize(data.images[i : i + 1], ck.norm)
        pred = int(np.argmax(model(x).value[0]))
        model(x)
        stats = cam.ignore_mask_stats(cam.ignoring_response(model)[0], 4)
        assert int(row["class_index"]) == pred and row["source"] == "ignoring_response"
        assert float(row["border_mean"]) == stats.border_mean
        assert float(row["interior_mean"]) == stats.interior_mean
        heat = cam.grad_cam(model, x[0], pred)
        assert np.array_equal(cam.read_pnm(tmp_path / "cam1" / f"cam_{i:04d}.pgm"),
                              np.rint(heat.values * 255).astype(np.uint8))
