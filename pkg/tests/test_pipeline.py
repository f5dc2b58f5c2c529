import json
import os

import numpy as np
import pydot
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moorenet import artifacts, cli
from moorenet import rng as rngs
from moorenet.artifacts import LineageError, decode_array, encode_array, latest, load, save, versions
from moorenet.config import ExperimentConfig, load_config, preset, save_config
from moorenet.envs import make_env
from moorenet.mmn import insert
from moorenet.pipeline import CONFIG_ERROR, EXIT_CODES, STAGES, Pipeline, render_markdown
from moorenet.policy import PolicyNet, collect_rollouts, mce_arch
from moorenet.qbn import Qbn, QbnConfig
from moorenet.envs.tomita import tomita_ground_truth_machine

PRESETS = ["amnesia", "blind", "tracker", "blind-8-4", "amnesia-4-2"] + [f"tomita{g}" for g in range(1, 8)]


def small_config(name="tomita1"):
    d = preset(name).to_dict()
    d["imitation"].update(train_episodes=200, max_epochs=6)
    d["rollout_episodes"] = 60
    d["qbn_h"]["encoder_widths"] = None
    d["qbn_train"]["max_epochs"] = 5
    d["fine_tune"].update(max_epochs=1, eval_episodes=10)
    d["extract"].update(min_episodes=50, saturation_window=50, max_episodes=150, chunk=50)
    d["eval_episodes"] = 20
    return ExperimentConfig.from_dict(d)


# -- config ---------------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(PRESETS), st.integers(0, 2**31))
def test_config_round_trip(name, seed):
    cfg = preset(name).with_seed(seed)
    back = ExperimentConfig.from_json(cfg.to_json())
    assert back == cfg
    assert back.digest() == cfg.digest()


def test_config_file_round_trip(tmp_path):
    cfg = preset("tomita3")
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg


def test_config_rejects_unknown_fields_and_schema():
    d = preset("blind").to_dict()
    d["imitation"]["momentum"] = 0.9
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict(d)
    d = preset("blind").to_dict()
    d["schema"] = "moorenet.config/0"
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict(d)


def test_seed_changes_digest():
    assert preset("tracker").digest() != preset("tracker").with_seed(1).digest()


def test_preset_sizes():
    assert (preset("blind").qbn_h.size, preset("blind").qbn_f.size) == (8, 4)
    assert (preset("amnesia").qbn_h.size, preset("amnesia").qbn_f.size) == (8, 8)
    assert preset("tomita5").qbn_f is None and preset("tomita5").qbn_h.size == 16


# -- artifacts ------------------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["<f8", ">f8", "<i8", "<f4"]), st.lists(st.integers(0, 4), min_size=0, max_size=3), st.integers(0, 1000))
def test_array_codec_is_bitwise(dtype, shape, seed):
    a = (np.random.default_rng(seed).normal(size=shape) * 1e6).astype(dtype)
    b = decode_array(json.loads(json.dumps(encode_array(a))))
    assert b.shape == a.shape
    assert b.dtype.isnative
    assert a.astype(a.dtype.newbyteorder("=")).tobytes() == b.tobytes()


def test_special_floats_survive():
    a = np.array([np.nan, np.inf, -0.0, 5e-324])
    b = decode_array(encode_array(a))
    assert a.tobytes() == b.tobytes()


def _mmn():
    net = PolicyNet.init(mce_arch(), rngs.stream(0, "p"))
    return insert(net, Qbn.init(QbnConfig(8, 4), rngs.stream(0, "h")), Qbn.init(QbnConfig(4, 3), rngs.stream(0, "f")))


@pytest.mark.parametrize("kind", ["policy", "qbn", "mmn", "machine", "rollouts"])
def test_artifact_round_trip(kind, tmp_path):
    mmn = _mmn()
    env = make_env({"kind": "mce", "instance": "tracker"})
    obj = {
        "policy": mmn.policy,
        "qbn": mmn.qbn_h,
        "mmn": mmn,
        "machine": tomita_ground_truth_machine(3),
        "rollouts": collect_rollouts(mmn.policy, env, 5, 0.1, seed=2),
    }[kind]
    ref = save(str(tmp_path), "s", kind, obj, "cfg")
    back, doc = load(ref.path, kind, "cfg")
    assert doc["digest"] == ref.digest
    again = save(str(tmp_path), "s", kind, back, "cfg")
    assert again.digest == ref.digest  # identical payload bytes
    assert again.version == 2


def test_artifacts_never_overwritten_and_versioned(tmp_path):
    m = tomita_ground_truth_machine(1)
    refs = [save(str(tmp_path), "st", "machine", m, "c") for _ in range(3)]
    assert versions(str(tmp_path), "st") == [1, 2, 3]
    assert latest(str(tmp_path), "st") == refs[-1].path
    assert len({r.path for r in refs}) == 3


def test_lineage_and_tamper_checks(tmp_path):
    ref = save(str(tmp_path), "st", "machine", tomita_ground_truth_machine(1), "config-a")
    with pytest.raises(LineageError):
        load(ref.path, config_digest="config-b")
    with pytest.raises(LineageError):
        load(ref.path, kind="policy")
    with open(ref.path) as fh:
        doc = json.load(fh)
    doc["payload"]["labels"][0] = 1 - doc["payload"]["labels"][0]
    with open(ref.path, "w") as fh:
        json.dump(doc, fh)
    with pytest.raises(LineageError):
        artifacts.read(ref.path)


def test_parents_recorded(tmp_path):
    cfg = small_config()
    pipe = Pipeline(cfg, str(tmp_path))
    pipe.run_stage("train-rnn")
    pipe.run_stage("train-qbn")
    rollouts = artifacts.read(latest(str(tmp_path), "rollouts"))
    policy = artifacts.read(latest(str(tmp_path), "train-rnn"))
    qbn = artifacts.read(latest(str(tmp_path), "qbn-h"))
    assert rollouts["parents"] == {"train-rnn": policy["digest"]}
    assert qbn["parents"] == {"rollouts": rollouts["digest"]}


# -- pipeline and CLI -------------------------------------------------------------------


def test_missing_input_gives_stage_exit_code(tmp_path):
    code = cli.main(["insert", "--preset", "tomita1", "--out", str(tmp_path)])
    assert code == EXIT_CODES["insert"]


def test_bad_config_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"name": "x"}')
    assert cli.main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == CONFIG_ERROR
    assert cli.main(["show-config", "nosuchthing"]) == CONFIG_ERROR


def test_exit_codes_distinct():
    assert len(set(EXIT_CODES.values())) == len(STAGES)
    assert CONFIG_ERROR not in EXIT_CODES.values() and 0 not in EXIT_CODES.values()


def test_cli_full_run_and_lineage(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    save_config(small_config("tomita2"), cfg_path)
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
    headline = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(headline) >= {"score", "states", "equivalent"}
    dots = sorted(n for n in os.listdir(out) if n.endswith(".dot"))
    assert len(dots) == 2
    for n in dots:
        assert len(pydot.graph_from_dot_data((out / n).read_text())) == 1
    assert (out / "report.md").read_text().startswith("| Grammar")
    # a different seed must not consume these artifacts
    code = cli.main(["eval", "--config", str(cfg_path), "--seed", "5", "--out", str(out)])
    assert code == EXIT_CODES["eval"]
    # re-running a stage adds a version
    assert cli.main(["minimize", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert versions(str(out), "minimize") == [1, 2]


def test_show_config_round_trips(capsys):
    assert cli.main(["show-config", "tracker", "--seed", "3"]) == 0
    cfg = ExperimentConfig.from_json(capsys.readouterr().out)
    assert cfg == preset("tracker").with_seed(3)


def test_report_numbers_recomputable_from_artifacts(tmp_path):
    from moorenet.automata import equivalent
    from moorenet.extraction import MachineActor, symbol_alignment
    from moorenet.policy import evaluate

    cfg = small_config("tomita4")
    pipe = Pipeline(cfg, str(tmp_path))
    doc = pipe.run()
    env = make_env(cfg.env)
    eps = env.episodes(cfg.seed, "evaluate", cfg.eval_episodes)
    mmn, _ = load(latest(str(tmp_path), "fine-tune"), "mmn", cfg.digest())
    small, _ = load(latest(str(tmp_path), "minimize"), "machine", cfg.digest())
    assert evaluate(mmn, env, eps).score == doc["eval"]["mmn_score"]
    assert evaluate(MachineActor(small, mmn), env, eps).score == doc["eval"]["machine_score"]
    truth = env.ground_truth_machine()
    try:
        verdict = equivalent(truth, small, alignment=symbol_alignment(small, mmn, env, truth)).equal
    except KeyError:
        verdict = False
    assert verdict == doc["eval"]["equivalent"]
    assert doc["minimize"]["states"] == small.n_states


def test_eval_counts_machine_failures(tmp_path):
    cfg = small_config("tomita1")
    pipe = Pipeline(cfg, str(tmp_path))
    pipe.run()
    assert isinstance(pipe.metrics("eval")["machine_failures"], int)


def test_fine_tune_skipped_when_insertion_matches_teacher():
    doc = {"env": {"kind": "mce", "instance": "blind"}, "b_h": 8, "b_f": 4,
           "insert": {"mmn_score": 1.0}, "fine-tune": {"skipped": True, "score": 1.0},
           "minimize": {"raw_states": 12, "raw_observations": 3, "states": 10, "observations": 1},
           "eval": {"equivalent": True}}
    row = render_markdown([doc]).splitlines()[2]
    assert row == "| blind | 8, 4 | 1.00 | - | 12, 3 | 10, 1 | True |"
