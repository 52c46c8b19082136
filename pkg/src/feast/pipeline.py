"""Config-driven orchestration of the full flavor-embedding pipeline.

A run is a pure function of (input files, config, seed). Every stage can
also run alone on the CSV artifacts of the stage before it.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import jsonschema
import numpy as np

from feast import __version__
from feast.combiners import cca_align, icp_align, procrustes_align, snack_embed
from feast.data_model import (
    HOLDOUT_MODES,
    DistanceMatrix,
    Embedding2D,
    EmbeddingTable,
    build_distance_matrix,
    holdout_matrix,
    holdout_triplets,
    load_embeddings,
    parse_attributes,
    parse_napping,
    read_distance_matrix,
    read_embedding2d,
    split_triplets_by_wine,
    triplets_from_matrix,
    write_distance_matrix,
    write_embedding2d,
    write_napping,
)
from feast.errors import ConfigError, FeastError, InputError
from feast.evaluation import ATTRIBUTES, BinScheme, attribute_report, bin_attribute, tar_score
from feast.human_kernel import TsteParams, nmds_smacof, tste_embed
from feast.machine_kernel import TsneParams, pca_reduce, standardize, tsne_reduce
from feast.plots import emit_scatter

log = logging.getLogger(__name__)

ARTIFACTS = {
    "human": "human.csv",
    "machine": "machine.csv",
    "combined": "combined.csv",
    "report": "report.json",
    "scatter": "scatter.svg",
    "distances": "distances.csv",
    "digitized": "digitized.csv",
}
PARTIAL_MARKER = ".partial"

_PARAMS = {"type": "object"}
_PATH = {"type": "string", "minLength": 1}

CONFIG_SCHEMA: dict = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "feast pipeline config",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": _PATH,
        "inputs": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "napping": _PATH,
                "distance_matrix": _PATH,
                "attributes": _PATH,
                "embeddings": {"oneOf": [_PATH, {"type": "array", "items": _PATH, "minItems": 1}]},
                "pooling": {"enum": ["mean", "first", "concatenate"]},
                "human": _PATH,
                "machine": _PATH,
                "combined": _PATH,
                "sheets": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["directory", "legends"],
                    "properties": {
                        "directory": _PATH,
                        "palette": {
                            "type": "object",
                            "additionalProperties": {
                                "type": "object",
                                "required": ["hue"],
                                "properties": {
                                    "hue": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                                    "sat": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                                    "val": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                                },
                            },
                        },
                        "legends": {
                            "type": "object",
                            "additionalProperties": {
                                "type": "object",
                                "required": ["event_name", "session_round_name", "experiment_no", "legend"],
                                "properties": {
                                    "event_name": {"type": "string"},
                                    "session_round_name": {"type": "string"},
                                    "experiment_no": {"type": "integer"},
                                    "legend": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 0}},
                                },
                            },
                        },
                        "target_size": {"type": "array", "items": {"type": "integer", "minimum": 8},
                                        "minItems": 2, "maxItems": 2},
                        "min_area": {"type": "integer", "minimum": 1},
                    },
                },
            },
        },
        "distances": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "normalize": {"type": "boolean"},
                "aggregate": {"enum": ["mean", "median"]},
            },
        },
        "human_kernel": {
            "type": "object",
            "additionalProperties": False,
            "required": ["method"],
            "properties": {"method": {"enum": ["nmds", "tste", "tsne"]}, "params": _PARAMS},
        },
        "machine_kernel": {
            "type": "object",
            "additionalProperties": False,
            "required": ["method"],
            "properties": {
                "method": {"enum": ["pca", "tsne"]},
                "standardize": {"type": "boolean"},
                "params": _PARAMS,
            },
        },
        "combiner": {
            "type": "object",
            "additionalProperties": False,
            "required": ["method"],
            "properties": {
                "method": {"enum": ["cca", "procrustes", "icp", "snack", "none"]},
                "params": _PARAMS,
            },
        },
        "evaluation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tar": {"type": "boolean"},
                "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "holdout": {"enum": list(HOLDOUT_MODES)},
                "classifier": {"enum": ["knn", "mlp", "none"]},
                "record_key": {"enum": ["experiment_id", "vintage_id"]},
                "k": {"type": "integer", "minimum": 1},
                "folds": {"type": "integer", "minimum": 2},
                "mlp": _PARAMS,
                "oversample_first": {"type": "boolean"},
                "binning": {
                    "type": "object",
                    "propertyNames": {"enum": list(ATTRIBUTES)},
                    "additionalProperties": {
                        "type": "object",
                        "required": ["method"],
                        "properties": {
                            "method": {"enum": ["category", "distinct", "quantile"]},
                            "n_classes": {"type": "integer", "minimum": 1},
                        },
                    },
                },
                "scatter_attribute": {"enum": list(ATTRIBUTES)},
            },
        },
    },
}

DEFAULTS = {
    "seed": 0,
    "output_dir": "feast_out",
    "inputs": {},
    "distances": {"normalize": False, "aggregate": "mean"},
    "human_kernel": {"method": "nmds", "params": {}},
    "machine_kernel": {"method": "tsne", "standardize": False, "params": {}},
    "combiner": {"method": "cca", "params": {}},
    "evaluation": {
        "tar": True,
        "test_fraction": 0.3,
        "holdout": "pairs",
        "classifier": "knn",
        "record_key": "experiment_id",
        "k": 5,
        "folds": 5,
        "mlp": {},
        "oversample_first": False,
        "binning": {},
        "scatter_attribute": "country",
    },
}


class StageError(FeastError):
    """A stage failure; keeps the original error's exit code."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        self.exit_code = exit_code_for(cause)
        super().__init__(f"stage {stage!r} failed: {cause}")


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return exc.exit_code
    if isinstance(exc, FeastError):
        return exc.exit_code
    if isinstance(exc, (ValueError, TypeError, jsonschema.ValidationError)):
        return ConfigError.exit_code
    return 1


# --------------------------------------------------------------------------
# Config
# --------------------------------------------------------------------------


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class PipelineConfig:
    raw: dict
    settings: dict
    base_dir: Path

    @property
    def seed(self) -> int:
        return int(self.settings["seed"])

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.settings["output_dir"])

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def input(self, name: str) -> Optional[Path]:
        value = self.settings.get("inputs", {}).get(name)
        return None if value is None else self.resolve(value)

    def stage(self, name: str) -> dict:
        return self.settings[name]


def validate_config(raw: Any) -> None:
    try:
        jsonschema.Draft7Validator(CONFIG_SCHEMA).validate(raw)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None


def make_config(raw: dict, base_dir=".", seed: Optional[int] = None, output_dir=None) -> PipelineConfig:
    """Validate ``raw`` and fill defaults; overrides do not touch the echo."""
    validate_config(raw)
    settings = _merge(DEFAULTS, raw)
    if seed is not None:
        settings["seed"] = int(seed)
    if output_dir is not None:
        settings["output_dir"] = str(Path(output_dir).resolve())
    return PipelineConfig(copy.deepcopy(raw), settings, Path(base_dir))


def load_config(path, seed: Optional[int] = None, output_dir=None) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return make_config(raw, path.parent, seed, output_dir)


def _params(cls, given: dict, **defaults):
    names = {f.name for f in fields(cls)}
    unknown = set(given) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} parameter(s): {', '.join(sorted(unknown))}")
    try:
        return cls(**{**defaults, **given})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {cls.__name__}: {exc}") from None


def _pick(given: dict, allowed: dict) -> dict:
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown parameter(s): {', '.join(sorted(unknown))}")
    return {**allowed, **given}


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------


@dataclass
class RunState:
    cfg: PipelineConfig
    meta: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    annotations: Optional[list] = None
    matrix: Optional[DistanceMatrix] = None
    triplets: Optional[list] = None
    split: Any = None
    human: Optional[Embedding2D] = None
    machine_table: Optional[EmbeddingTable] = None
    machine: Optional[Embedding2D] = None
    combined: Optional[Embedding2D] = None
    records: Optional[list] = None

    @property
    def out(self) -> Path:
        return self.cfg.output_dir


def _stage(name):
    def wrap(fn):
        def run(state: RunState, *args, **kwargs):
            start = time.perf_counter()
            try:
                result = fn(state, *args, **kwargs)
            except StageError:
                raise
            except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
                raise StageError(name, exc) from exc
            state.timing[name] = time.perf_counter() - start
            return result

        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run

    return wrap


@_stage("digitize")
def stage_digitize(state: RunState) -> list:
    """Digitize every configured sheet photo into napping rows."""
    from feast.digitizer import DEFAULT_PALETTE, ColorPalette, digitize_sheet, load_image

    sheets = state.cfg.stage("inputs")["sheets"]
    directory = state.cfg.resolve(sheets["directory"])
    palette = ColorPalette.from_dict(sheets["palette"]) if "palette" in sheets else DEFAULT_PALETTE
    size = tuple(sheets.get("target_size", (1050, 1485)))
    min_area = int(sheets.get("min_area", 20))
    names = sorted(sheets["legends"])

    def one(name):
        spec = sheets["legends"][name]
        key = (spec["event_name"], spec["session_round_name"], spec["experiment_no"])
        return digitize_sheet(load_image(directory / name), palette, spec["legend"], key,
                              target_size=size, min_area=min_area)

    results = _map_threads(one, names)
    annotations = [a for r in results for a in r.annotations]
    missing = {n: list(r.missing) for n, r in zip(names, results) if r.missing}
    state.meta["digitize"] = {"sheets": len(names), "stickers": len(annotations), "missing_colors": missing}
    state.out.mkdir(parents=True, exist_ok=True)
    write_napping(annotations, state.out / ARTIFACTS["digitized"])
    return annotations


def _map_threads(fn, items):
    threads = feast_threads()
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def feast_threads() -> int:
    value = os.environ.get("FEAST_THREADS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        raise ConfigError(f"FEAST_THREADS must be an integer, got {value!r}") from None


@_stage("distances")
def stage_distances(state: RunState) -> DistanceMatrix:
    """Assemble the distance matrix and its triplets, then split them."""
    cfg = state.cfg
    dm_path = cfg.input("distance_matrix")
    if dm_path is not None:
        m = read_distance_matrix(dm_path)
    else:
        annotations = list(state.annotations or [])
        nap = cfg.input("napping")
        if nap is not None:
            annotations = parse_napping(nap) + annotations
        if not annotations:
            raise InputError("no napping annotations: set inputs.napping, inputs.distance_matrix or inputs.sheets")
        d = cfg.stage("distances")
        m = build_distance_matrix(annotations, d["normalize"], d["aggregate"])
    state.matrix = m
    state.triplets = triplets_from_matrix(m)
    ev = cfg.stage("evaluation")
    info = {
        "wines": len(m),
        "observed_pairs": int(np.count_nonzero(np.triu(m.observed, 1))),
        "skipped_sheets": m.skipped_sheets,
        "triplets": len(state.triplets),
    }
    if ev["tar"] and state.triplets:
        state.split = split_triplets_by_wine(state.triplets, ev["test_fraction"], cfg.seed)
        info.update(
            train_triplets=len(state.split.train),
            test_triplets=len(state.split.test),
            discarded_triplets=state.split.discarded,
            test_wines=list(state.split.test_wines),
            holdout=ev["holdout"],
        )
    state.meta["distances"] = info
    state.out.mkdir(parents=True, exist_ok=True)
    write_distance_matrix(m, state.out / ARTIFACTS["distances"])
    return m


def _training_view(state: RunState):
    """Distance matrix and triplets with held-out information hidden."""
    if state.split is None:
        return state.matrix, state.triplets
    mode = state.cfg.stage("evaluation")["holdout"]
    tw = state.split.test_wines
    return holdout_matrix(state.matrix, tw, mode), holdout_triplets(state.triplets, tw, mode)


@_stage("human_kernel")
def stage_human(state: RunState) -> Embedding2D:
    hk = state.cfg.stage("human_kernel")
    params = dict(hk.get("params", {}))
    seed = state.cfg.seed
    m, triplets = _training_view(state)
    if hk["method"] == "nmds":
        p = _pick(params, {"n_init": 10, "max_iter": 500, "eps": 1e-4})
        res = nmds_smacof(m, p["n_init"], p["max_iter"], p["eps"], seed)
        emb = res.embedding
        meta = {"method": "nmds", "stress": res.stress, "iterations": res.iterations_used,
                "restart": res.restart_index}
    elif hk["method"] == "tste":
        if not triplets:
            raise InputError("no training triplets for t-STE")
        emb = tste_embed(triplets, 2, _params(TsteParams, params, seed=seed))
        meta = {"method": "tste", **emb.meta}
    else:
        p = _params(TsneParams, params, seed=seed, perplexity=min(30.0, (len(m) - 1) / 3.0))
        emb = tsne_reduce(m, p)
        meta = {"method": "tsne", "kl": emb.meta["kl"], "iterations": emb.meta["iterations"],
                "jitter_applied": emb.meta["jitter_applied"], "missing_fill": "max"}
    state.human = emb
    state.meta["human_kernel"] = meta
    state.out.mkdir(parents=True, exist_ok=True)
    write_embedding2d(emb, state.out / ARTIFACTS["human"])
    return emb


def load_machine_table(cfg: PipelineConfig) -> EmbeddingTable:
    """Load one or more embedding tables; several are joined column-wise on shared ids."""
    given = cfg.stage("inputs").get("embeddings")
    if given is None:
        raise InputError("inputs.embeddings is required for the machine kernel")
    paths = [given] if isinstance(given, str) else list(given)
    pool = cfg.stage("inputs").get("pooling", "mean")
    tables = [load_embeddings(cfg.resolve(p), pool) for p in paths]
    if len(tables) == 1:
        return tables[0]
    common = sorted(set.intersection(*(set(t.ids) for t in tables)))
    if not common:
        raise InputError("embedding tables share no ids")
    return EmbeddingTable(tuple(common), np.hstack([t.subset(common).vectors for t in tables]))


@_stage("machine_kernel")
def stage_machine(state: RunState) -> Embedding2D:
    mk = state.cfg.stage("machine_kernel")
    table = load_machine_table(state.cfg)
    if mk.get("standardize"):
        table = standardize(table)
    state.machine_table = table
    if mk["method"] == "pca":
        if mk.get("params"):
            raise ConfigError("pca takes no parameters")
        emb = pca_reduce(table)
        meta = {"method": "pca", "explained_variance": emb.meta["explained_variance"]}
    else:
        p = _params(TsneParams, mk.get("params", {}), seed=state.cfg.seed,
                    perplexity=min(30.0, (len(table) - 1) / 3.0))
        emb = tsne_reduce(table, p)
        meta = {"method": "tsne", "kl": emb.meta["kl"], "iterations": emb.meta["iterations"],
                "jitter_applied": emb.meta["jitter_applied"], "perplexity": p.perplexity}
    meta.update(wines=len(table), input_dim=table.dim)
    state.machine = emb
    state.meta["machine_kernel"] = meta
    state.out.mkdir(parents=True, exist_ok=True)
    write_embedding2d(emb, state.out / ARTIFACTS["machine"])
    return emb


def _unit_rms(e: Embedding2D) -> Embedding2D:
    X = e.points - e.points.mean(axis=0)
    rms = np.sqrt((X**2).sum(axis=1).mean())
    return Embedding2D(e.ids, X / rms if rms > 0 else X)


def _average_shared(moved: Embedding2D, human: Embedding2D) -> np.ndarray:
    """Average aligned machine points with human points where both exist."""
    out = moved.points.copy()
    hidx = human.index
    for r, w in enumerate(moved.ids):
        if w in hidx:
            out[r] = (out[r] + human.points[hidx[w]]) / 2.0
    return out


def combine(machine: Optional[Embedding2D], human: Optional[Embedding2D], method: str, params: dict,
            machine_table=None, triplets=None, seed: int = 0):
    """Combined embedding over every machine id, plus combiner metadata."""
    if method != "snack" and machine is None:
        raise InputError(f"combiner {method!r} needs a machine embedding")
    if method == "none":
        return machine, {"method": "none"}
    if method == "snack":
        p = _pick(params, {"lambda": 0.5, "tsne": {}, "tste": {}})
        if machine_table is None or not triplets:
            raise InputError("snack needs the machine table and training triplets")
        keep = set(machine_table.ids)
        trip = [t for t in triplets if t[0] in keep and t[1] in keep and t[2] in keep]
        tp = _params(TsneParams, p["tsne"], seed=seed, perplexity=min(30.0, (len(machine_table) - 1) / 3.0))
        sp = _params(TsteParams, p["tste"], seed=seed)
        emb = snack_embed(machine_table, trip, p["lambda"], tp, sp)
        return emb, {"method": "snack", "lambda": p["lambda"], "objective": emb.meta["objective"],
                     "triplets_used": len(trip)}
    if human is None:
        raise InputError(f"combiner {method!r} needs a human embedding")
    if method == "cca":
        p = _pick(params, {"mode": "average"})
        res = cca_align(machine, human, p["mode"])
        return res.combined, {"method": "cca", "correlations": list(res.correlations),
                              "overlap": len(res.overlap), "rank_deficient": res.rank_deficient,
                              "mode": p["mode"]}
    if method == "procrustes":
        _pick(params, {})
        aligned, disparity = procrustes_align(human, machine)
        ref = human.subset(aligned.meta["overlap_ids"]).points
        mu, norm = ref.mean(axis=0), np.linalg.norm(ref - ref.mean(axis=0))
        human_std = Embedding2D(human.ids, (human.points - mu) / norm)
        emb = Embedding2D(machine.ids, _average_shared(aligned, human_std))
        return emb, {"method": "procrustes", "disparity": disparity}
    if method == "icp":
        p = _pick(params, {"max_iter": 100, "tol": 1e-10})
        h, m = _unit_rms(human), _unit_rms(machine)
        res = icp_align(h, m, p["max_iter"], p["tol"])
        emb = Embedding2D(machine.ids, _average_shared(res.aligned, h))
        return emb, {"method": "icp", "iterations": res.iterations, "final_mse": res.mse_history[-1]}
    raise ConfigError(f"unknown combiner {method!r}")


@_stage("combine")
def stage_combine(state: RunState) -> Embedding2D:
    c = state.cfg.stage("combiner")
    _, triplets = _training_view(state) if state.matrix is not None else (None, None)
    emb, meta = combine(state.machine, state.human, c["method"], dict(c.get("params", {})),
                        state.machine_table, triplets, state.cfg.seed)
    state.combined = emb
    state.meta["combine"] = meta
    state.out.mkdir(parents=True, exist_ok=True)
    write_embedding2d(emb, state.out / ARTIFACTS["combined"])
    return emb


@_stage("evaluate")
def stage_evaluate(state: RunState) -> dict:
    ev = state.cfg.stage("evaluation")
    result: dict = {}
    if ev["tar"] and state.split is not None and state.split.test:
        test = state.split.test
        for name, emb in (("combined", state.combined), ("machine", state.machine), ("human", state.human)):
            if emb is None:
                continue
            try:
                tar, evaluated, skipped = tar_score(emb, test)
            except InputError:
                continue
            result[f"tar_{name}"] = {"tar": tar, "evaluated": evaluated, "skipped": skipped}
    attr_path = state.cfg.input("attributes")
    if attr_path is not None and ev["classifier"] != "none":
        state.records = parse_attributes(attr_path)
        schemes = {a: BinScheme(s["method"], s.get("n_classes")) for a, s in ev["binning"].items()}
        target = _first(state.combined, state.machine, state.human)
        rep = attribute_report(
            target, state.records, ev["classifier"], state.cfg.seed,
            schemes=schemes, key=ev["record_key"], k=ev["k"], folds=ev["folds"],
            oversample_first=ev["oversample_first"],
            **{f"mlp_{k}": v for k, v in _pick(ev["mlp"], {"hidden": 100, "epochs": 200, "lr": 1e-3}).items()},
        )
        result["attributes"] = rep.to_dict()
    state.meta["evaluate"] = result
    return result


# --------------------------------------------------------------------------
# Runs
# --------------------------------------------------------------------------


def build_report(state: RunState) -> dict:
    return {
        "toolkit": "feast",
        "version": __version__,
        "seed": state.cfg.seed,
        "config": state.cfg.raw,
        "stages": state.meta,
        "timing": {k: round(v, 6) for k, v in state.timing.items()},
    }


def write_report(report: dict, path: Path) -> None:
    path.write_text(json.dumps(report, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _first(*embeddings):
    return next((e for e in embeddings if e is not None), None)


def _scatter(state: RunState) -> None:
    emb = _first(state.combined, state.machine, state.human)
    if emb is None:
        return
    labels = None
    if state.records:
        ev = state.cfg.stage("evaluation")
        try:
            labels = bin_attribute(state.records, ev["scatter_attribute"], key=ev["record_key"])
            labels = labels.subset([w for w in labels.ids if w in emb.index])
        except InputError:
            labels = None
    emit_scatter(emb, labels, state.out / ARTIFACTS["scatter"])


def mark_partial(out: Path, err: Exception) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / PARTIAL_MARKER).write_text(f"{err}\n", encoding="utf-8")


def clear_partial(out: Path) -> None:
    marker = out / PARTIAL_MARKER
    if marker.exists():
        marker.unlink()


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Digitize (optional), ingest, embed, combine and evaluate; write all artifacts."""
    state = RunState(cfg)
    out = cfg.output_dir
    try:
        out.mkdir(parents=True, exist_ok=True)
        clear_partial(out)
        if cfg.stage("inputs").get("sheets"):
            state.annotations = stage_digitize(state)
        stage_distances(state)
        stage_human(state)
        stage_machine(state)
        stage_combine(state)
        stage_evaluate(state)
        _scatter(state)
        report = build_report(state)
        write_report(report, out / ARTIFACTS["report"])
        return report
    except Exception as exc:
        mark_partial(out, exc)
        if state.meta:
            write_report(build_report(state), out / ARTIFACTS["report"])
        raise


def _run_config_path(args):
    path, seed, out = args
    cfg = load_config(path, seed, out)
    run_pipeline(cfg)
    return str(cfg.output_dir)


def run_batch(paths, seed=None, out=None) -> list:
    """Run independent configs, up to FEAST_THREADS at a time in separate processes.

    Returns one ``(path, error or None)`` pair per config.
    """
    jobs = []
    for p in paths:
        target = None
        if out is not None:
            target = Path(out) / Path(p).stem if len(paths) > 1 else Path(out)
        jobs.append((str(p), seed, target))
    threads = feast_threads()
    results = []
    if threads <= 1 or len(jobs) <= 1:
        for job in jobs:
            try:
                _run_config_path(job)
                results.append((job[0], None))
            except Exception as exc:  # noqa: BLE001 - reported per config
                results.append((job[0], exc))
        return results
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(_run_config_path, job) for job in jobs]
        for job, fut in zip(jobs, futures):
            try:
                fut.result()
                results.append((job[0], None))
            except Exception as exc:  # noqa: BLE001
                results.append((job[0], exc))
    return results


# standalone stage entry points used by the CLI


def run_digitize(cfg: PipelineConfig) -> dict:
    state = RunState(cfg)
    if not cfg.stage("inputs").get("sheets"):
        raise ConfigError("inputs.sheets is required for digitize")
    stage_digitize(state)
    return state.meta


def run_embed_human(cfg: PipelineConfig) -> dict:
    state = RunState(cfg)
    stage_distances(state)
    stage_human(state)
    _write_sidecar(state, "human")
    return state.meta


def run_embed_machine(cfg: PipelineConfig) -> dict:
    state = RunState(cfg)
    stage_machine(state)
    _write_sidecar(state, "machine")
    return state.meta


def _artifact(cfg: PipelineConfig, name: str) -> Path:
    given = cfg.input(name)
    return given if given is not None else cfg.output_dir / ARTIFACTS[name]


def run_combine(cfg: PipelineConfig) -> dict:
    state = RunState(cfg)
    method = cfg.stage("combiner")["method"]
    if method == "snack":
        stage_distances(state)
        state.machine_table = load_machine_table(cfg)
    else:
        state.machine = read_embedding2d(_artifact(cfg, "machine"))
        if method != "none":
            state.human = read_embedding2d(_artifact(cfg, "human"))
    stage_combine(state)
    _write_sidecar(state, "combined")
    return state.meta


def run_evaluate(cfg: PipelineConfig) -> dict:
    state = RunState(cfg)
    state.combined = read_embedding2d(_artifact(cfg, "combined"))
    for name in ("machine", "human"):
        path = _artifact(cfg, name)
        if path.exists():
            setattr(state, name, read_embedding2d(path))
    if cfg.input("napping") is not None or cfg.input("distance_matrix") is not None:
        stage_distances(state)
    stage_evaluate(state)
    report = build_report(state)
    write_report(report, cfg.output_dir / ARTIFACTS["report"])
    return report


def run_plot(cfg: PipelineConfig) -> Path:
    state = RunState(cfg)
    state.combined = read_embedding2d(_artifact(cfg, "combined"))
    attr = cfg.input("attributes")
    if attr is not None:
        state.records = parse_attributes(attr)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    _scatter(state)
    return cfg.output_dir / ARTIFACTS["scatter"]


def _write_sidecar(state: RunState, name: str) -> None:
    stage = {"human": "human_kernel", "machine": "machine_kernel", "combined": "combine"}[name]
    path = state.out / f"{name}.json"
    path.write_text(json.dumps(state.meta.get(stage, {}), indent=2, sort_keys=True, default=_json_default) + "\n",
                    encoding="utf-8")
