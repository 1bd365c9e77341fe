"""JSON containers for matrices and problem instances.

Arrays are stored as base64-encoded little-endian float64 so a decoded
instance is bit-identical to the one written.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict

import numpy as np

from .problem import BgParams, MatrixSpec, ProblemInstance, SvdMatrix

SCHEMA_VERSION = 1


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "<f8",
            "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=d.get("dtype", "<f8")).reshape(d["shape"]).astype(float)


def matrix_to_dict(matrix: SvdMatrix, spec: MatrixSpec | None = None) -> dict:
    out = {
        "schema": SCHEMA_VERSION,
        "kind": "svd_matrix",
        "M": matrix.M,
        "N": matrix.N,
        "U": encode_array(matrix.U),
        "V": encode_array(matrix.V),
        "s": encode_array(matrix.s),
    }
    if spec is not None:
        out["spec"] = asdict(spec)
        out["seed"] = spec.seed
    return out


def matrix_from_dict(d: dict) -> SvdMatrix:
    if d.get("kind") != "svd_matrix":
        raise ValueError("not an svd_matrix container")
    return SvdMatrix(U=decode_array(d["U"]), V=decode_array(d["V"]), s=decode_array(d["s"]))


def instance_to_dict(inst: ProblemInstance) -> dict:
    spec = inst.meta.get("spec")
    return {
        "schema": SCHEMA_VERSION,
        "kind": "problem_instance",
        "matrix": matrix_to_dict(inst.matrix, spec),
        "x_true": encode_array(inst.x_true),
        "w": encode_array(inst.w),
        "y": encode_array(inst.y),
        "theta1_true": inst.theta1_true.as_dict(),
        "theta2_true": inst.theta2_true,
        "snr_db": inst.snr_db,
        "realized_snr_db": inst.meta.get("realized_snr_db"),
        "seed": inst.meta.get("seed"),
    }


def instance_from_dict(d: dict) -> ProblemInstance:
    if d.get("kind") != "problem_instance":
        raise ValueError("not a problem_instance container")
    meta = {"realized_snr_db": d.get("realized_snr_db"), "seed": d.get("seed")}
    if "spec" in d["matrix"]:
        meta["spec"] = MatrixSpec(**d["matrix"]["spec"])
    return ProblemInstance(
        matrix=matrix_from_dict(d["matrix"]),
        x_true=decode_array(d["x_true"]),
        w=decode_array(d["w"]),
        y=decode_array(d["y"]),
        theta1_true=BgParams(**d["theta1_true"]),
        theta2_true=float(d["theta2_true"]),
        snr_db=float(d["snr_db"]),
        meta=meta,
    )


def dump(obj: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh)


def load(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
