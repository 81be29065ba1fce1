import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bridgecond import checkpoint as ckpt_io
from bridgecond.cli import _seed, build_parser, main
from bridgecond.config import RunConfig
from bridgecond.datapipe.imageio import read_ppm
from bridgecond.datapipe.mock_scorer import main as _unused  # noqa: F401  (module must import cleanly)
from bridgecond.datapipe.pipeline import read_manifest

SMALL_CONFIG = """\
# small model so the command tests stay quick
seed=0
model.d_llm=16
model.llm_layers=1
model.llm_heads=2
model.d_vision=8
model.d_cond=8
model.t_q=2
model.mapper_hidden=16
model.d_model=16
model.den_blocks=1
model.den_heads=2
model.diffusion_steps=50
stage1.steps=3
stage2.steps=3
stage3.steps=3
stage1.batch_size=4
stage2.batch_size=4
stage3.batch_size=4
edit.steps=5
"""


# --- config ------------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = RunConfig.loads(SMALL_CONFIG)
    assert cfg.model.d_llm == 16 and cfg.stage3.steps == 3 and cfg.edit.steps == 5
    cfg.save(tmp_path / "c.cfg")
    assert RunConfig.load(tmp_path / "c.cfg") == cfg
    assert "edit.lambda=1.0" in cfg.dumps() and "stage1.lambda=none" in cfg.dumps()


def test_config_rejects_bad_input():
    with pytest.raises(ValueError, match="unknown"):
        RunConfig.loads("model.width=3")
    with pytest.raises(ValueError, match="duplicate"):
        RunConfig.loads("seed=1\nseed=2")
    with pytest.raises(ValueError, match="key=value"):
        RunConfig.loads("seed")
    with pytest.raises(ValueError, match="profile"):
        RunConfig.loads("profile=huge")
    with pytest.raises(ValueError):
        RunConfig.loads("seed=abc")
    with pytest.raises(ValueError):
        RunConfig.loads("model=3")
    with pytest.raises(ValueError):
        RunConfig.loads("model.d_llm=30\nmodel.llm_heads=4")


def test_config_schedule_overrides():
    cfg = RunConfig.loads("profile=paper\nstage2.lr=0.5\nstage3.lambda=0.25\nstage3.steps=7")
    assert cfg.schedule(1).lr == 2e-4
    assert cfg.schedule(2).lr == 0.5 and cfg.schedule(2).warmup_ratio == 0.001
    s3 = cfg.schedule(3)
    assert s3.lam == 0.25 and s3.steps == 7 and s3.losses == ("target_image_feature", "sd")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 10, allow_nan=False), st.sampled_from(["toy", "paper"]),
       st.one_of(st.none(), st.floats(1e-6, 1.0)), st.one_of(st.none(), st.integers(1, 100)))
def test_config_round_trips_losslessly(seed, lam, profile, lr, steps):
    cfg = RunConfig(seed=seed, profile=profile)
    cfg.edit.lam, cfg.stage2.lr, cfg.edit.steps = lam, lr, steps
    assert RunConfig.loads(cfg.dumps()) == cfg


def test_seed_precedence(monkeypatch):
    cfg = RunConfig(seed=5)
    args = build_parser().parse_args(["gradcheck"])
    monkeypatch.delenv("BRIDGECOND_SEED", raising=False)
    assert _seed(args, cfg) == 5
    monkeypatch.setenv("BRIDGECOND_SEED", "9")
    assert _seed(args, cfg) == 9
    args.seed = 2
    assert _seed(args, cfg) == 2


# --- parser ------------------------------------------------------------------

COMMANDS = ("gen-world", "build-dataset", "train", "edit", "eval", "gradcheck")


@pytest.mark.parametrize("command", COMMANDS)
def test_help_lists_flags_with_defaults(command, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert "--seed" in out or command == "eval"
    assert "default:" in out


def test_unknown_flag_is_rejected(capsys):
    assert_exit(["gen-world", "--out", "x", "--colour", "red"], 1)
    assert "unrecognized" in capsys.readouterr().err


def assert_exit(argv, code):
    try:
        got = main(argv)
    except SystemExit as exc:
        got = exc.code
    assert got == code, argv


# --- commands ----------------------------------------------------------------

def test_gen_world(tmp_path, capsys):
    assert main(["gen-world", "--count", "10", "--seed", "3", "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-world", "--count", "10", "--seed", "3", "--out", str(tmp_path / "b")]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len([f for f in files if f.endswith(".ppm")]) == 10
    assert all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    assert main(["gen-world", "--count", "0", "--out", str(tmp_path / "c")]) == 0
    assert list((tmp_path / "c").iterdir()) == []


def _accepted_built(out: str) -> tuple[int, int]:
    counts = dict(line.rsplit(": ", 1) for line in out.splitlines() if ": " in line)
    return int(counts["pairs accepted"]), int(counts["pairs built"])


def test_build_dataset_threshold_sweep(tmp_path, capsys):
    accepted = []
    for tau in (0, 5, 9):
        assert main(["build-dataset", "--scenes", "6", "--tau-q", str(tau), "--out", str(tmp_path / str(tau))]) == 0
        out = capsys.readouterr().out
        for key in ("objects found", "masks kept", "pairs built", "pairs accepted"):
            assert key in out
        a, b = _accepted_built(out)
        accepted.append(a)
        if tau == 0:
            assert a == b
    assert accepted[0] >= accepted[1] >= accepted[2]


def test_build_dataset_partial_scorer_failure_exits_2(tmp_path):
    import sys

    cmd = f"cmd:{sys.executable} -m bridgecond.datapipe.mock_scorer --mode garbled"
    assert main(["build-dataset", "--scenes", "2", "--scorer", cmd, "--out", str(tmp_path)]) == 2


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Dataset plus stage 1-3 checkpoints from the small config."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.cfg"
    cfg.write_text(SMALL_CONFIG)
    assert main(["build-dataset", "--scenes", "4", "--config", str(cfg), "--out", str(root / "data")]) == 0
    for stage in (1, 2, 3):
        argv = ["train", "--stage", str(stage), "--data", str(root / "data"), "--config", str(cfg),
                "--out", str(root / "run")]
        if stage > 1:
            argv += ["--from-checkpoint", str(root / "run" / f"stage{stage - 1}.ckpt")]
        assert main(argv) == 0
    return root


def test_train_outputs_and_trace_columns(trained):
    for stage, cols in ((1, "llm,text_feature,image_feature"), (2, "llm,sd,target_image_feature"),
                        (3, "target_image_feature,sd")):
        header = (trained / "run" / f"stage{stage}_trace.csv").read_text().splitlines()[0]
        assert header == f"step,stage,total,{cols}"
        assert ckpt_io.load(trained / "run" / f"stage{stage}.ckpt").stage == stage


def test_train_is_repeatable(trained, tmp_path):
    argv = ["train", "--stage", "1", "--data", str(trained / "data"), "--config", str(trained / "small.cfg"),
            "--out", str(tmp_path)]
    assert main(argv) == 0
    assert (tmp_path / "stage1.ckpt").read_bytes() == (trained / "run" / "stage1.ckpt").read_bytes()


def test_train_requires_previous_checkpoint(trained, capsys):
    assert main(["train", "--stage", "3", "--data", str(trained / "data"), "--out", "unused"]) == 1
    assert "requires --from-checkpoint" in capsys.readouterr().err
    wrong = ["train", "--stage", "3", "--data", str(trained / "data"), "--out", "unused",
             "--from-checkpoint", str(trained / "run" / "stage1.ckpt")]
    assert main(wrong) == 1


def test_train_rejects_config_mismatch(trained, tmp_path, capsys):
    other = tmp_path / "other.cfg"
    other.write_text(SMALL_CONFIG.replace("model.d_model=16", "model.d_model=32"))
    argv = ["train", "--stage", "2", "--data", str(trained / "data"), "--config", str(other), "--out",
            str(tmp_path), "--from-checkpoint", str(trained / "run" / "stage1.ckpt")]
    assert main(argv) == 1
    assert "mismatch" in capsys.readouterr().err


def _edit(trained, out, *extra):
    rows = read_manifest(trained / "data" / "manifest.jsonl")
    argv = ["edit", "--checkpoint", str(trained / "run" / "stage3.ckpt"), "--config", str(trained / "small.cfg"),
            "--image", str(trained / "data" / rows[0]["src_path"]), "--instruction", rows[0]["instruction"],
            "--out", str(out), *extra]
    return main(argv)


def test_edit_single_image(trained, tmp_path):
    assert _edit(trained, tmp_path / "a.ppm", "--seed", "4") == 0
    assert _edit(trained, tmp_path / "b.ppm", "--seed", "4") == 0
    assert _edit(trained, tmp_path / "c.ppm", "--seed", "4", "--lambda", "0") == 0
    a = read_ppm(tmp_path / "a.ppm")
    assert a.shape == (32, 32, 3)
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()
    assert not np.array_equal(a, read_ppm(tmp_path / "c.ppm"))


def test_edit_warns_on_early_stage_checkpoint(trained, tmp_path, capsys):
    rows = read_manifest(trained / "data" / "manifest.jsonl")
    argv = ["edit", "--checkpoint", str(trained / "run" / "stage2.ckpt"), "--image",
            str(trained / "data" / rows[0]["src_path"]), "--instruction", "remove it.", "--steps", "3",
            "--out", str(tmp_path / "x.ppm")]
    assert main(argv) == 0
    assert "warning" in capsys.readouterr().err


def test_edit_with_nan_weights_exits_3(trained, tmp_path):
    ck = ckpt_io.load(trained / "run" / "stage3.ckpt")
    name = next(n for n in ck.params if n.startswith("denoiser.head"))
    ck.params[name][...] = np.nan
    ckpt_io.save(tmp_path / "nan.ckpt", ck)
    rows = read_manifest(trained / "data" / "manifest.jsonl")
    argv = ["edit", "--checkpoint", str(tmp_path / "nan.ckpt"), "--image",
            str(trained / "data" / rows[0]["src_path"]), "--instruction", "remove it.", "--out",
            str(tmp_path / "x.ppm")]
    assert main(argv) == 3


def test_edit_manifest_then_eval(trained, tmp_path, capsys):
    manifest = str(trained / "data" / "manifest.jsonl")
    assert main(["edit", "--checkpoint", str(trained / "run" / "stage3.ckpt"), "--config",
                 str(trained / "small.cfg"), "--manifest", manifest, "--out", str(tmp_path / "pred")]) == 0
    rows = read_manifest(manifest)
    assert len(list((tmp_path / "pred").iterdir())) == len(rows)
    assert main(["eval", "--manifest", manifest, "--pred", str(tmp_path / "pred"), "--out",
                 str(tmp_path / "r.csv")]) == 0
    assert "VIEScore" in capsys.readouterr().out
    os.remove(tmp_path / "pred" / f"{rows[0]['id']}.ppm")
    assert main(["eval", "--manifest", manifest, "--pred", str(tmp_path / "pred"), "--out",
                 str(tmp_path / "r.csv")]) == 1


def test_eval_perfect_predictions_score_ten(trained, tmp_path, capsys):
    import shutil

    manifest = trained / "data" / "manifest.jsonl"
    (tmp_path / "pred").mkdir()
    for r in read_manifest(manifest):
        shutil.copy(trained / "data" / r["tgt_path"], tmp_path / "pred" / f"{r['id']}.ppm")
    assert main(["eval", "--manifest", str(manifest), "--pred", str(tmp_path / "pred"), "--scorer", "mock",
                 "--out", str(tmp_path / "r.csv")]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].split() == ["VIEScore", "CLIPScore", "PSNR", "SSIM", "LPIPS"]
    assert table[1].split()[:2] == ["1.0000", "n/a"]


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--module", "lora"]) == 0
    out = capsys.readouterr().out
    assert "lora" in out and "ok" in out
    assert_exit(["gradcheck", "--module", "everything"], 1)
