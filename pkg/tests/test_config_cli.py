import json
from pathlib import Path

import numpy as np
import pytest

from virtmic import cli, net
from virtmic.arraysim import load_manifest
from virtmic.beamform import LoadingSpec, enhance, oracle_irm_masks
from virtmic.config import (EVAL_SEED_BASE, TRAIN_SEED_BASE, ConfigError, from_dict, load_config)
from virtmic.evaluate import BfLayout
from virtmic.signal import stft
from virtmic.train import restore
from virtmic.wavio import read_wav, read_wav_comment

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke.json"


def test_seed_mandatory_and_cli_override():
    with pytest.raises(ConfigError, match="seed"):
        from_dict({})
    assert from_dict({}, seed=7).seed == 7
    assert from_dict({"seed": 1}, seed=7).seed == 7


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        from_dict({"seed": 0, "bogus": 1})
    with pytest.raises(ConfigError, match=r"config\.training"):
        from_dict({"seed": 0, "training": {"lr": 1}})
    with pytest.raises(ConfigError, match="top-level seed"):
        from_dict({"seed": 0, "training": {"seed": 3}})


def test_hash_canonical_and_sensitive():
    a = from_dict({"seed": 0, "training": {"epochs": 3, "batch_size": 2}})
    b = from_dict({"training": {"batch_size": 2, "epochs": 3}, "seed": 0})
    assert a.hash == b.hash and len(a.hash) == 16
    assert from_dict({"seed": 1}).hash != from_dict({"seed": 0}).hash
    assert a.training.seed == 0 and from_dict({"seed": 5}).training.seed == 5


def test_shipped_configs_load():
    for path in (ROOT / "configs").glob("*.json"):
        cfg = load_config(path)
        assert cfg.hyperparams().c_in == 2
    desk = load_config(ROOT / "configs" / "desk.json")
    assert desk.scenes.train_count >= 200 and desk.scenes.eval_count >= 50
    assert desk.beamformer.epsilon == 0.05


def test_default_layouts_mirror_table_rows():
    cfg = from_dict({"seed": 0})
    described = [(lay.label, lay.describe()) for lay in cli._layouts(cfg)]
    assert described == [("RM BF", "4,6"), ("RM BF", "4,5,6"), ("VM BF", "4,6 + 5")]


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    out = tmp_path_factory.mktemp("e2e")
    assert cli.main(["--config", str(SMOKE), "e2e", str(out)]) == 0
    return out


def test_e2e_artifacts_embed_hash(smoke):
    cfg = load_config(SMOKE)
    header = json.loads((smoke / "data/train/manifest.jsonl").read_text().splitlines()[0])
    assert header["config_hash"] == cfg.hash
    assert read_wav_comment(smoke / "data/eval/scene00000000_mixture.wav") == f"config_hash={cfg.hash}"
    assert read_wav_comment(smoke / "samples/virtual.wav") == f"config_hash={cfg.hash}"
    for line in (smoke / "model/loss_log.jsonl").read_text().splitlines():
        assert json.loads(line)["config_hash"] == cfg.hash
    assert f"config_hash: {cfg.hash}" in (smoke / "report.txt").read_text()


def test_simulate_seed_ranges_disjoint(smoke):
    train = load_manifest(smoke / "data/train/manifest.jsonl")
    ev = load_manifest(smoke / "data/eval/manifest.jsonl")
    tr_seeds = {r["seed"] for r in train.records}
    ev_seeds = {r["seed"] for r in ev.records}
    assert not tr_seeds & ev_seeds
    assert min(tr_seeds) >= TRAIN_SEED_BASE and max(ev_seeds) < TRAIN_SEED_BASE
    assert min(ev_seeds) == EVAL_SEED_BASE


def test_simulate_reproducible_and_creates_dir(tmp_path):
    a = tmp_path / "nested/a"
    assert cli.main(["--config", str(SMOKE), "simulate", str(a)]) == 0
    assert cli.main(["--config", str(SMOKE), "simulate", str(tmp_path / "b")]) == 0
    for f in sorted(a.rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(a)).read_bytes()


def test_train_resumes(smoke, tmp_path):
    cfg = load_config(SMOKE)
    out = tmp_path / "model"
    cli.train_model(from_dict({**json.loads(SMOKE.read_text()),
                               "training": {**json.loads(SMOKE.read_text())["training"],
                                            "epochs": 1}}),
                    smoke / "data/train/manifest.jsonl", out)
    res = cli.train_model(cfg, smoke / "data/train/manifest.jsonl", out)
    assert res.epoch == cfg.training.epochs - 1
    assert len((out / "loss_log.jsonl").read_text().splitlines()) == \
        len((smoke / "model/loss_log.jsonl").read_text().splitlines())


def test_train_refuses_mismatched_targets(smoke, tmp_path, capsys):
    cfg = json.loads(SMOKE.read_text())
    cfg["scenes"]["target_ids"] = [5, 2]
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    code = cli.main(["--config", str(path), "train", str(smoke / "data/train/manifest.jsonl"),
                     str(tmp_path / "m")])
    err = capsys.readouterr().err.strip().splitlines()
    assert code != 0 and len(err) == 1
    record = json.loads(err[0])
    assert record["command"] == "train" and "do not match" in record["message"]


def test_estimate_length_deterministic_and_checked(smoke, tmp_path, capsys):
    ckpt = smoke / "model/checkpoint.bin"
    inp = smoke / "samples/input.wav"
    for name in ("a.wav", "b.wav"):
        assert cli.main(["estimate", str(ckpt), str(tmp_path / name), str(inp),
                         "--input-ids", "4,6"]) == 0
    a, b = read_wav(tmp_path / "a.wav"), read_wav(tmp_path / "b.wav")
    assert len(a) == len(read_wav(inp)) and np.array_equal(a.samples, b.samples)
    capsys.readouterr()
    code = cli.main(["estimate", str(ckpt), str(tmp_path / "c.wav"), str(inp), str(inp),
                     "--input-ids", "4,6,1,2"])
    assert code != 0 and "input channels" in json.loads(capsys.readouterr().err)["message"]


def test_beamform_epsilon_zero_matches_unloaded(smoke, tmp_path):
    cfg = load_config(SMOKE)
    manifest = smoke / "data/eval/manifest.jsonl"
    out = cli.beamform(cfg, BfLayout("VM BF", (4, 6), (5,), 0.0), tmp_path / "o.wav",
                       manifest=manifest, scene=1, checkpoint=smoke / "model/checkpoint.bin")
    scene = load_manifest(manifest).load_scene(1)
    sc = cfg.beamformer.stft_config(16000)
    masks = oracle_irm_masks(stft(scene.clean.channel(4), sc), stft(scene.noise.channel(4), sc))
    hp, params, _, _ = restore(smoke / "model/checkpoint.bin")
    r = scene.mixture.select((4, 6))
    unloaded = enhance(r, net.vme_forward(params, r, hp), masks, sc, LoadingSpec((), 0.0))
    assert np.array_equal(out.signal, unloaded.signal)


def test_beamform_virtual_without_checkpoint_fails(smoke, tmp_path, capsys):
    code = cli.main(["--config", str(SMOKE), "beamform", str(tmp_path / "o.wav"), "--manifest",
                     str(smoke / "data/eval/manifest.jsonl"), "--real", "4,6", "--virtual", "5"])
    assert code != 0 and "checkpoint" in json.loads(capsys.readouterr().err)["message"]


def test_beamform_from_wavs(smoke, tmp_path):
    d = smoke / "data/eval"
    assert cli.main(["--config", str(SMOKE), "beamform", str(tmp_path / "o.wav"),
                     "--mixture", str(d / "scene00000000_mixture.wav"),
                     "--clean", str(d / "scene00000000_clean.wav"),
                     "--noise", str(d / "scene00000000_noise.wav"), "--real", "4,5,6"]) == 0
    assert len(read_wav(tmp_path / "o.wav")) == 8000


def test_evaluate_reproducible_and_partial(smoke, tmp_path, capsys):
    args = ["--config", str(SMOKE), "evaluate", str(smoke / "data/eval/manifest.jsonl"),
            str(smoke / "model/checkpoint.bin"), "--out"]
    assert cli.main(args + [str(tmp_path / "r")]) == 0
    for name in ("report.txt", "report_vm.jsonl", "report_bf.jsonl"):
        assert (tmp_path / "r" / name).read_bytes() == (smoke / name).read_bytes()
    lines = (smoke / "data/eval/manifest.jsonl").read_text().splitlines()
    part = smoke / "data/eval/partial.jsonl"
    part.write_text("\n".join(lines[:2]) + "\n")
    capsys.readouterr()
    assert cli.main(args[:3] + [str(part), args[4]]) == 0
    assert "partial manifest: 1 of 2" in capsys.readouterr().out


def test_gradcheck_corrupt_flag_fails(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 0, "network": {"N": 8, "B": 6, "H": 8, "X": 2, "R": 1}}))
    assert cli.main(["--config", str(p), "gradcheck"]) == 0
    ok = json.loads(capsys.readouterr().out)
    assert ok["passed"] and ok["max_rel_error"] < 1e-4
    assert cli.main(["--config", str(p), "gradcheck", "--corrupt"]) == 1
    assert not json.loads(capsys.readouterr().out)["passed"]


def test_missing_config_is_structured_error(tmp_path, capsys):
    code = cli.main(["--config", str(tmp_path / "nope.json"), "simulate", str(tmp_path)])
    err = capsys.readouterr().err.strip().splitlines()
    assert code != 0 and len(err) == 1 and json.loads(err[0])["error"]
