"""Stage-by-stage experiment pipeline with persisted artifacts and reports.

Stages read their inputs from the latest artifact of the preceding stages
under the output directory and refuse inputs produced under a different
config.  Reports contain no timestamps or timings so that identical configs
produce byte-identical files.
"""

import dataclasses
import json
import logging
import os

from . import artifacts
from . import rng as rngs
from .automata import canonical, equivalent, minimize, to_dot
from .envs import make_env
from .extraction import MachineActor, extract, symbol_alignment
from .mmn import fine_tune, insert
from .policy import PolicyNet, TrainingFailed, collect_rollouts, evaluate, imitation_train, step_accuracy
from .qbn import Qbn, QbnConfig, qbn_train

log = logging.getLogger(__name__)

STAGES = ("train-rnn", "train-qbn", "insert", "fine-tune", "extract", "minimize", "eval", "export-dot")
EXIT_CODES = {stage: 10 + i for i, stage in enumerate(STAGES)}
CONFIG_ERROR = 2


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.exit_code = EXIT_CODES[stage]


def _round(x, digits=6):
    return None if x is None else round(float(x), digits)


class Pipeline:
    def __init__(self, cfg, out_dir):
        self.cfg = cfg
        self.out = out_dir
        self.digest = cfg.digest()
        self.env = make_env(cfg.env)
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, f"config-{self.digest[:12]}.json")
        if not os.path.exists(path):
            with open(path, "w") as fh:
                fh.write(cfg.to_json())

    # -- artifact plumbing ---------------------------------------------------

    def _save(self, stage, kind, obj, parents=()):
        refs = {p: artifacts.read(artifacts.latest(self.out, p))["digest"] for p in parents}
        return artifacts.save(self.out, stage, kind, obj, self.digest, refs)

    def _load(self, stage, kind, needed_by):
        try:
            obj, _ = artifacts.load(artifacts.latest(self.out, stage), kind, self.digest)
        except (FileNotFoundError, artifacts.LineageError) as exc:
            raise StageError(needed_by, str(exc)) from exc
        return obj

    def _metrics(self, stage, values, parents=()):
        self._save(f"{stage}.metrics", "report", values, parents)
        return values

    def metrics(self, stage):
        return self._load(f"{stage}.metrics", "report", "eval")

    def _eval_episodes(self):
        return self.env.episodes(self.cfg.seed, "evaluate", self.cfg.eval_episodes)

    # -- stages --------------------------------------------------------------

    def train_rnn(self):
        cfg = self.cfg
        net = PolicyNet.init(cfg.arch, rngs.stream(cfg.seed, "init", "policy"))
        try:
            net, m = imitation_train(net, self.env, cfg.imitation, cfg.seed)
        except TrainingFailed as exc:
            raise StageError("train-rnn", str(exc)) from exc
        self._save("train-rnn", "policy", net)
        eval_eps = self._eval_episodes()
        return self._metrics(
            "train-rnn",
            {
                "train_accuracy": _round(m.train_accuracy),
                "test_accuracy": _round(m.test_accuracy),
                "eval_accuracy": _round(step_accuracy(net, eval_eps)),
                "eval_score": _round(evaluate(net, self.env, eval_eps).score),
                "epochs": m.epochs,
                "final_loss": _round(m.final_loss),
            },
            ["train-rnn"],
        )

    def train_qbn(self):
        cfg = self.cfg
        net = self._load("train-rnn", "policy", "train-qbn")
        data = collect_rollouts(net, self.env, cfg.rollout_episodes, cfg.rollout_epsilon, cfg.seed, "train-rnn")
        self._save("rollouts", "rollouts", data, ["train-rnn"])
        out = {}
        jobs = [("qbn-h", cfg.qbn_h, data.all_hidden(), cfg.arch.hidden_size)]
        if cfg.qbn_f is not None:
            jobs.append(("qbn-f", cfg.qbn_f, data.all_features(), cfg.arch.feature_dim))
        for stage, spec, x, dim in jobs:
            qcfg = QbnConfig(dim, spec.size, spec.encoder_widths, spec.output_activation)
            q = Qbn.init(qcfg, rngs.stream(cfg.seed, "init", stage))
            try:
                q, m = qbn_train(q, x, cfg.qbn_train, cfg.seed, stage)
            except TrainingFailed as exc:
                raise StageError("train-qbn", str(exc)) from exc
            self._save(stage, "qbn", q, ["rollouts"])
            out[stage] = {
                "train_mse": _round(m.train_mse, 9),
                "holdout_mse": _round(m.holdout_mse, 9),
                "epochs": m.epochs,
                "distinct_codes": len(m.code_histogram),
            }
        return self._metrics("train-qbn", out, [s for s, *_ in jobs])

    def insert(self):
        net = self._load("train-rnn", "policy", "insert")
        qh = self._load("qbn-h", "qbn", "insert")
        qf = self._load("qbn-f", "qbn", "insert") if self.cfg.qbn_f is not None else None
        try:
            mmn = insert(net, qh, qf)
        except ValueError as exc:
            raise StageError("insert", str(exc)) from exc
        self._save("insert", "mmn", mmn, ["train-rnn", "qbn-h"] + (["qbn-f"] if qf is not None else []))
        eval_eps = self._eval_episodes()
        return self._metrics(
            "insert",
            {
                "teacher_score": _round(evaluate(net, self.env, eval_eps).score),
                "mmn_score": _round(evaluate(mmn, self.env, eval_eps).score),
            },
            ["insert"],
        )

    def fine_tune(self):
        mmn = self._load("insert", "mmn", "fine-tune")
        before = self.metrics("insert")
        if before["mmn_score"] >= before["teacher_score"]:
            self._save("fine-tune", "mmn", mmn, ["insert"])
            return self._metrics("fine-tune", {"skipped": True, "score": before["mmn_score"], "epochs": 0}, ["fine-tune"])
        teacher = self._load("train-rnn", "policy", "fine-tune")
        rollouts = self._load("rollouts", "rollouts", "fine-tune")
        try:
            tuned, m = fine_tune(mmn, rollouts, self.env, self.cfg.fine_tune, self.cfg.seed, teacher)
        except TrainingFailed as exc:
            raise StageError("fine-tune", str(exc)) from exc
        self._save("fine-tune", "mmn", tuned, ["insert", "rollouts"])
        score = evaluate(tuned, self.env, self._eval_episodes()).score
        return self._metrics(
            "fine-tune",
            {"skipped": False, "score": _round(score), "epochs": m.epochs, "selection_score": _round(m.post_score)},
            ["fine-tune"],
        )

    def extract(self):
        mmn = self._load("fine-tune", "mmn", "extract")
        machine, stats = extract(mmn, self.env, self.cfg.extract, self.cfg.seed)
        self._save("extract", "machine", canonical(machine), ["fine-tune"])
        return self._metrics("extract", dataclasses.asdict(stats), ["extract"])

    def minimize(self):
        raw = self._load("extract", "machine", "minimize")
        small = minimize(raw)
        self._save("minimize", "machine", small, ["extract"])
        return self._metrics(
            "minimize",
            {
                "raw_states": raw.n_states,
                "raw_observations": len(raw.observations),
                "states": small.n_states,
                "observations": len(small.observations),
            },
            ["minimize"],
        )

    def eval(self):
        mmn = self._load("fine-tune", "mmn", "eval")
        small = self._load("minimize", "machine", "eval")
        eps = self._eval_episodes()
        mm_eval = evaluate(MachineActor(small, mmn), self.env, eps)
        out = {
            "mmn_score": _round(evaluate(mmn, self.env, eps).score),
            "machine_score": _round(mm_eval.score),
            "machine_failures": mm_eval.failures,
            "equivalent": None,
            "counterexample": None,
        }
        try:
            truth = self.env.ground_truth_machine()
        except NotImplementedError:
            truth = None
        if truth is not None:
            try:
                verdict = equivalent(truth, small, alignment=symbol_alignment(small, mmn, self.env, truth))
                out["equivalent"] = verdict.equal
                out["counterexample"] = None if verdict.counterexample is None else list(verdict.counterexample)
            except (KeyError, ValueError) as exc:
                out["equivalent"] = False
                out["counterexample"] = f"unalignable: {exc}"
            out["truth_states"] = truth.n_states
            out["truth_observations"] = len(truth.observations)
        return self._metrics("eval", out, ["minimize", "fine-tune"])

    def export_dot(self):
        raw = self._load("extract", "machine", "export-dot")
        small = self._load("minimize", "machine", "export-dot")
        paths = {}
        for tag, mm in (("raw", raw), ("minimized", small)):
            path = os.path.join(self.out, f"{self.cfg.name}-{tag}.dot")
            with open(path, "w") as fh:
                fh.write(to_dot(mm, f"{self.cfg.name}_{tag}".replace("-", "_")))
            paths[tag] = os.path.basename(path)
        return paths

    def run_stage(self, stage):
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        log.info("stage %s", stage)
        try:
            return getattr(self, stage.replace("-", "_"))()
        except StageError:
            raise
        except (FloatingPointError, ValueError, KeyError, OSError, artifacts.LineageError) as exc:
            raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc

    def run(self):
        for stage in STAGES:
            self.run_stage(stage)
        return self.report()

    # -- reporting -----------------------------------------------------------

    def report(self):
        """Collect every stage's metrics into one document and write it out."""
        doc = {"experiment": self.cfg.name, "config": self.digest, "env": self.cfg.env}
        for stage in STAGES[:-1]:
            try:
                doc[stage] = self.metrics(stage)
            except StageError:
                doc[stage] = None
        doc["b_h"] = self.cfg.qbn_h.size
        doc["b_f"] = None if self.cfg.qbn_f is None else self.cfg.qbn_f.size
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
        with open(os.path.join(self.out, "report.json"), "w") as fh:
            fh.write(text)
        with open(os.path.join(self.out, "report.md"), "w") as fh:
            fh.write(render_markdown([doc]))
        return doc


def _fmt(x):
    if x is None:
        return "-"
    if isinstance(x, float):
        return f"{x:.2f}"
    return str(x)


def render_markdown(docs):
    """Reports as tables: MCE rows with scores and machine sizes, Tomita rows with accuracies."""
    mce = [d for d in docs if d["env"]["kind"] == "mce"]
    tom = [d for d in docs if d["env"]["kind"] == "tomita"]
    lines = []
    if mce:
        lines += [
            "| Game | Bh, Bf | Score before FT | Score after FT | Raw \\|H\\|, \\|O\\| | Min \\|H\\|, \\|O\\| | Equivalent |",
            "|---|---|---|---|---|---|---|",
        ]
        for d in mce:
            ft, mn, ins = d["fine-tune"] or {}, d["minimize"] or {}, d["insert"] or {}
            after = None if ft.get("skipped", True) else ft.get("score")
            lines.append(
                f"| {d['env']['instance']} | {d['b_h']}, {d['b_f']} | {_fmt(ins.get('mmn_score'))} | {_fmt(after)} "
                f"| {_fmt(mn.get('raw_states'))}, {_fmt(mn.get('raw_observations'))} "
                f"| {_fmt(mn.get('states'))}, {_fmt(mn.get('observations'))} | {_fmt((d['eval'] or {}).get('equivalent'))} |"
            )
        lines.append("")
    if tom:
        lines += [
            "| Grammar | Bh | RNN acc | MMN acc before FT | MMN acc after FT | Raw \\|H\\| | Min \\|H\\| | Equivalent |",
            "|---|---|---|---|---|---|---|---|",
        ]
        for d in tom:
            ft, mn, ins, rnn = d["fine-tune"] or {}, d["minimize"] or {}, d["insert"] or {}, d["train-rnn"] or {}
            after = None if ft.get("skipped", True) else ft.get("score")
            lines.append(
                f"| {d['env']['grammar']} | {d['b_h']} | {_fmt(rnn.get('eval_score'))} | {_fmt(ins.get('mmn_score'))} "
                f"| {_fmt(after)} | {_fmt(mn.get('raw_states'))} | {_fmt(mn.get('states'))} "
                f"| {_fmt((d['eval'] or {}).get('equivalent'))} |"
            )
        lines.append("")
    return "\n".join(lines)


def run_pipeline(cfg, out_dir):
    return Pipeline(cfg, out_dir).run()


def summary(doc):
    """Flat headline numbers of one report."""
    mn = doc.get("minimize") or {}
    ev = doc.get("eval") or {}
    ft = doc.get("fine-tune") or {}
    return {
        "rnn_accuracy": (doc.get("train-rnn") or {}).get("eval_accuracy"),
        "score_before": (doc.get("insert") or {}).get("mmn_score"),
        "fine_tune_skipped": ft.get("skipped"),
        "score": ev.get("mmn_score"),
        "machine_score": ev.get("machine_score"),
        "states": mn.get("states"),
        "observations": mn.get("observations"),
        "equivalent": ev.get("equivalent"),
    }

