"""Versioned, content-hashed artifact files.

Each stage output is a JSON document holding its kind, the config digest it
was produced under, the digests of its parent artifacts and a payload.
Arrays are stored as base64 of their little-endian bytes so that loading
reproduces them bitwise.  Files are never overwritten: every save writes
``<stage>/v<N>.json`` with the next free ``N``.
"""

import base64
import dataclasses
import hashlib
import json
import os

import numpy as np

from . import automata
from .mmn import MooreMachineNetwork
from .policy import PolicyArch, PolicyNet, RolloutDataset
from .qbn import Qbn, QbnConfig

SCHEMA = "moorenet.artifact/1"
KINDS = ("policy", "qbn", "mmn", "machine", "rollouts", "report")


class LineageError(RuntimeError):
    pass


def encode_array(a):
    a = np.asarray(a)
    dt = a.dtype.newbyteorder("<")
    return {
        "dtype": dt.str,
        "shape": list(a.shape),
        "data": base64.b64encode(a.astype(dt).tobytes(order="C")).decode("ascii"),
    }


def decode_array(doc):
    raw = base64.b64decode(doc["data"])
    return np.frombuffer(raw, dtype=np.dtype(doc["dtype"])).reshape(doc["shape"]).astype(np.dtype(doc["dtype"]).newbyteorder("="))


def _params(params):
    return {k: encode_array(v) for k, v in sorted(params.items())}


def _unparams(doc):
    return {k: decode_array(v) for k, v in doc.items()}


# -- payload codecs ----------------------------------------------------------


def policy_payload(net):
    return {"arch": dataclasses.asdict(net.arch), "params": _params(net.params)}


def policy_from(doc):
    return PolicyNet(PolicyArch(**doc["arch"]), _unparams(doc["params"]))


def qbn_payload(q):
    cfg = dataclasses.asdict(q.config)
    cfg["encoder_widths"] = list(cfg["encoder_widths"])
    return {"config": cfg, "params": _params(q.params)}


def qbn_from(doc):
    cfg = dict(doc["config"])
    cfg["encoder_widths"] = tuple(cfg["encoder_widths"])
    return Qbn(QbnConfig(**cfg), _unparams(doc["params"]))


def mmn_payload(m):
    return {
        "policy": policy_payload(m.policy),
        "qbn_h": qbn_payload(m.qbn_h),
        "qbn_f": None if m.qbn_f is None else qbn_payload(m.qbn_f),
    }


def mmn_from(doc):
    return MooreMachineNetwork(
        policy_from(doc["policy"]),
        qbn_from(doc["qbn_h"]),
        None if doc["qbn_f"] is None else qbn_from(doc["qbn_f"]),
    )


def rollouts_payload(r):
    return {
        "policy_id": r.policy_id,
        "seed": r.seed,
        "epsilon": r.epsilon,
        **{k: [encode_array(a) for a in getattr(r, k)] for k in ("observations", "features", "hidden", "dists", "actions")},
    }


def rollouts_from(doc):
    arrays = {k: [decode_array(a) for a in doc[k]] for k in ("observations", "features", "hidden", "dists", "actions")}
    return RolloutDataset(**arrays, policy_id=doc["policy_id"], seed=doc["seed"], epsilon=doc["epsilon"])


CODECS = {
    "policy": (policy_payload, policy_from),
    "qbn": (qbn_payload, qbn_from),
    "mmn": (mmn_payload, mmn_from),
    "machine": (automata.to_dict, automata.from_dict),
    "rollouts": (rollouts_payload, rollouts_from),
    "report": (lambda x: x, lambda x: x),
}


# -- files -------------------------------------------------------------------


def canonical_json(doc):
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def digest(doc):
    body = {k: v for k, v in doc.items() if k != "digest"}
    return hashlib.sha256(canonical_json(body).encode()).hexdigest()


@dataclasses.dataclass(frozen=True)
class ArtifactRef:
    path: str
    digest: str
    version: int


def save(out_dir, stage, kind, obj, config_digest, parents=None):
    """Write a new version of ``stage``; returns its :class:`ArtifactRef`."""
    if kind not in KINDS:
        raise ValueError(f"unknown artifact kind {kind!r}")
    parents = dict(sorted((parents or {}).items()))
    doc = {
        "schema": SCHEMA,
        "kind": kind,
        "stage": stage,
        "config": config_digest,
        "parents": parents,
        "payload": CODECS[kind][0](obj),
    }
    doc["digest"] = digest(doc)
    folder = os.path.join(out_dir, stage)
    os.makedirs(folder, exist_ok=True)
    version = len(versions(out_dir, stage)) + 1
    path = os.path.join(folder, f"v{version}.json")
    with open(path, "x") as fh:
        fh.write(canonical_json(doc) + "\n")
    return ArtifactRef(path, doc["digest"], version)


def versions(out_dir, stage):
    folder = os.path.join(out_dir, stage)
    if not os.path.isdir(folder):
        return []
    found = [int(n[1:-5]) for n in os.listdir(folder) if n.startswith("v") and n.endswith(".json")]
    return sorted(found)


def latest(out_dir, stage):
    found = versions(out_dir, stage)
    if not found:
        raise FileNotFoundError(f"no artifact for stage {stage!r} under {out_dir}")
    return os.path.join(out_dir, stage, f"v{found[-1]}.json")


def read(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema") != SCHEMA:
        raise LineageError(f"{path}: unsupported schema {doc.get('schema')!r}")
    if digest(doc) != doc.get("digest"):
        raise LineageError(f"{path}: content does not match its digest")
    return doc


def load(path, kind=None, config_digest=None):
    """Returns ``(object, document)``; checks kind and config lineage when given."""
    doc = read(path)
    if kind is not None and doc["kind"] != kind:
        raise LineageError(f"{path}: expected a {kind} artifact, found {doc['kind']}")
    if config_digest is not None and doc["config"] != config_digest:
        raise LineageError(f"{path}: produced under config {doc['config'][:12]}, current is {config_digest[:12]}")
    return CODECS[doc["kind"]][1](doc["payload"]), doc
