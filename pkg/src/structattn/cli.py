"""Batch entry points: oracle checks, FLOP reports, gradient checks,
training runs, and plot-data export.

Configs are JSON documents with sections model / task / train / cost /
seeds; unknown keys are rejected and every validation error names the
offending JSON path. Metrics are CSV, weights use the package's binary
tensor layout. Run directories are named <config-hash>-s<seed>, so
re-running the same config and seed overwrites its own outputs.

Exit codes: 0 success, 1 config or validation error, 2 numerical failure
(divergence or a tolerance breach). A run's seed overrides both the data
seed and the init seed, so one integer pins the whole run down.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .attention import (AttentionWeights, MLRAttentionConfig, ScoreFunctionConfig,
                        attention_layer_forward, init_attention_weights)
from .costs import attention_cost_report
from .icl import (DivergenceError, ICLTaskConfig, METRIC_COLUMNS, TrainConfig,
                  eval_error_at_N, train)
from .masks import MaskSpec
from .model import ModelConfig, Transformer, parameter_plan
from .structured import (BTTSpec, LowRankSpec, MLBTCSpec, MLRSpec, apply, bilinear,
                         factors_from_arrays, init_factors, materialize,
                         numeric_rank, param_count, rank_upper_bound)
from .tensor import (GradTape, ShapeError, Tensor, backward, finite_diff_grad,
                     load_tensors, relative_error, save_tensors, tsum)

SCHEMA_VERSION = "1"
ORACLE_TOL = 1e-10
GRAD_TOL = 1e-5


class ConfigError(Exception):
    """Validation failure carrying the JSON path of the offending entry."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# ---------------------------------------------------------------------------
# config loading
# ---------------------------------------------------------------------------

_TOP_KEYS = {"schema_version", "model", "task", "train", "cost", "seeds"}
_MODEL_KEYS = {"d_input", "d_model", "layers", "heads", "score_kind", "ranks",
               "btt_s", "qk_norm", "norm_constant", "window", "mlp_ratio"}
_TASK_KEYS = {"d_input", "n_pairs", "seed"}
_TRAIN_KEYS = {"steps", "batch_size", "base_lr", "base_width", "seed", "beta1",
               "beta2", "eps", "weight_decay", "precision", "eval_every",
               "eval_prompts"}
_COST_KEYS = {"T", "rows"}
_COST_ROW_KEYS = {"id", "family", "T", "D", "r", "ranks", "s", "order"}


def _load_json(path) -> dict:
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ConfigError(str(path), "config file not found")
    except json.JSONDecodeError as e:
        raise ConfigError(str(path), f"not valid JSON ({e})")
    if not isinstance(doc, dict):
        raise ConfigError(str(path), "top level must be a JSON object")
    return doc


def _check_keys(obj: dict, allowed: set, path: str):
    if not isinstance(obj, dict):
        raise ConfigError(path, "must be a JSON object")
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}", "unknown key")


def _section(doc: dict, name: str, keys: set) -> dict:
    if name not in doc:
        raise ConfigError(name, "missing section")
    _check_keys(doc[name], keys, name)
    return dict(doc[name])


def _build(cls, kwargs: dict, path: str):
    try:
        return cls(**kwargs)
    except (ValueError, TypeError, ShapeError) as e:
        raise ConfigError(path, str(e))


def _check_schema(doc: dict):
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version",
                          f"unsupported version {version!r}, this build reads {SCHEMA_VERSION!r}")


def load_experiment(doc: dict):
    """(ModelConfig, ICLTaskConfig, TrainConfig, seeds) from a config document."""
    _check_keys(doc, _TOP_KEYS, "config")
    _check_schema(doc)
    model_kw = _section(doc, "model", _MODEL_KEYS)
    if isinstance(model_kw.get("score_kind"), list):
        model_kw["score_kind"] = tuple(model_kw["score_kind"])
    if isinstance(model_kw.get("ranks"), list):
        model_kw["ranks"] = tuple(model_kw["ranks"])
    model_cfg = _build(ModelConfig, model_kw, "model")

    task_kw = _section(doc, "task", _TASK_KEYS) if "task" in doc else {}
    task_kw.setdefault("d_input", model_cfg.d_input)
    task_cfg = _build(ICLTaskConfig, task_kw, "task")
    if task_cfg.d_input != model_cfg.d_input:
        raise ConfigError("task.d_input", f"{task_cfg.d_input} does not match "
                                          f"model.d_input={model_cfg.d_input}")

    train_kw = _section(doc, "train", _TRAIN_KEYS)
    train_cfg = _build(TrainConfig, train_kw, "train")

    seeds = doc.get("seeds", [train_cfg.seed])
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(s, int) for s in seeds)):
        raise ConfigError("seeds", "must be a non-empty list of integers")
    return model_cfg, task_cfg, train_cfg, seeds


def resolved_doc(model_cfg, task_cfg, train_cfg, seed: int | None = None) -> dict:
    doc = {"schema_version": SCHEMA_VERSION, "model": asdict(model_cfg),
           "task": asdict(task_cfg), "train": asdict(train_cfg)}
    if seed is not None:
        doc["task"]["seed"] = seed
        doc["train"]["seed"] = seed
    return doc


def config_id(model_cfg, task_cfg, train_cfg) -> str:
    """Twelve hex chars naming the experiment, seed left out."""
    doc = resolved_doc(model_cfg, task_cfg, train_cfg)
    doc["task"]["seed"] = None
    doc["train"]["seed"] = None
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# run-directory plumbing
# ---------------------------------------------------------------------------

def _write_metrics(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow(["" if isinstance(row[c], float) and math.isnan(row[c])
                        else row[c] for c in METRIC_COLUMNS])


def _write_weights(run_dir: Path, model: Transformer, cid: str, seed: int):
    order = list(model.params)
    save_tensors(run_dir / "weights.bin", [model.params[p] for p in order])
    manifest = {"schema_version": SCHEMA_VERSION, "config_id": cid, "seed": seed,
                "parameters": [{"path": p, "shape": list(model.params[p].shape)}
                               for p in order]}
    with open(run_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)


def _load_weights(run_dir: Path, model_cfg, train_cfg) -> Transformer:
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(str(run_dir), "no run directory with weights here; train first")
    with open(manifest_path) as f:
        manifest = json.load(f)
    arrays = load_tensors(run_dir / "weights.bin")
    entries = manifest["parameters"]
    if len(arrays) != len(entries):
        raise ConfigError(str(run_dir), f"manifest lists {len(entries)} tensors, "
                                        f"weights.bin holds {len(arrays)}")
    params = {}
    for entry, arr in zip(entries, arrays):
        if tuple(arr.shape) != tuple(entry["shape"]):
            raise ConfigError(str(run_dir), f"{entry['path']}: stored shape {arr.shape} "
                                            f"!= manifest {tuple(entry['shape'])}")
        params[entry["path"]] = Tensor(np.asarray(arr, dtype=train_cfg.dtype),
                                       requires_grad=True)
    plan = parameter_plan(model_cfg, train_cfg.base_lr, train_cfg.base_width)
    want = {path: shape for path, shape, _ in plan}
    if set(params) != set(want):
        raise ConfigError(str(run_dir), "stored parameters do not match this model config")
    for path, shape in want.items():
        if params[path].shape != shape:
            raise ConfigError(str(run_dir), f"{path}: shape {params[path].shape} != {shape}")
    rules = {path: rule for path, _, rule in plan}
    return Transformer(model_cfg, params, rules)


def _train_single(model_cfg, task_cfg, train_cfg, run_dir: str, cid: str, seed: int) -> int:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.json", "w") as f:
        json.dump(resolved_doc(model_cfg, task_cfg, train_cfg, seed), f, indent=1,
                  sort_keys=True)
    try:
        result = train(model_cfg, task_cfg, train_cfg)
    except DivergenceError as e:
        _write_metrics(run_dir / "metrics.csv", e.rows)
        _write_weights(run_dir, Transformer(model_cfg, e.params), cid, seed)
        print(f"error: {e}", file=sys.stderr)
        return 2
    _write_metrics(run_dir / "metrics.csv", result.rows)
    _write_weights(run_dir, result.model, cid, seed)
    final = [r["eval_error"] for r in result.rows if not math.isnan(r["eval_error"])]
    print(f"{run_dir.name}: {train_cfg.steps} steps, "
          f"final eval error {final[-1]:.6f}")
    return 0


def _train_job(payload) -> int:
    return _train_single(*payload)


def cmd_train_icl(args) -> int:
    model_cfg, task_cfg, train_cfg, seeds = load_experiment(_load_json(args.config))
    if args.precision:
        train_cfg = replace(train_cfg, precision=args.precision)
    if args.seed is not None:
        seeds = [args.seed]
    cid = config_id(model_cfg, task_cfg, train_cfg)
    out_root = Path(args.out or "runs")
    jobs = []
    for s in seeds:
        jobs.append((model_cfg, replace(task_cfg, seed=s), replace(train_cfg, seed=s),
                     str(out_root / f"{cid}-s{s}"), cid, s))
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            codes = list(pool.map(_train_job, jobs))
    else:
        codes = [_train_job(j) for j in jobs]
    return max(codes)


def cmd_eval(args) -> int:
    model_cfg, task_cfg, train_cfg, seeds = load_experiment(_load_json(args.config))
    if args.precision:
        train_cfg = replace(train_cfg, precision=args.precision)
    seed = args.seed if args.seed is not None else seeds[0]
    cid = config_id(model_cfg, task_cfg, train_cfg)
    run_dir = Path(args.out or "runs") / f"{cid}-s{seed}"
    model = _load_weights(run_dir, model_cfg, train_cfg)
    prompts = args.prompts or train_cfg.eval_prompts
    err = eval_error_at_N(model, replace(task_cfg, seed=seed), prompts)
    print(json.dumps({"run": run_dir.name, "prompts": prompts, "eval_error": err}))
    return 0 if math.isfinite(err) else 2


# ---------------------------------------------------------------------------
# flops tables
# ---------------------------------------------------------------------------

FLOPS_COLUMNS = ("id", "family", "order", "score_flops", "projection_flops",
                 "params", "rank_bound", "kv_cache")


def _cost_rows(doc: dict) -> list[dict]:
    _check_keys(doc, _TOP_KEYS, "config")
    _check_schema(doc)
    if "cost" not in doc:
        raise ConfigError("cost", "missing section")
    cost = _section(doc, "cost", _COST_KEYS)
    default_t = cost.get("T")
    rows = cost.get("rows")
    if not isinstance(rows, list) or not rows:
        raise ConfigError("cost.rows", "must be a non-empty list")
    out = []
    for i, row in enumerate(rows):
        path = f"cost.rows[{i}]"
        _check_keys(row, _COST_ROW_KEYS, path)
        for key in ("id", "family", "D"):
            if key not in row:
                raise ConfigError(f"{path}.{key}", "required")
        t = row.get("T", default_t)
        if t is None:
            raise ConfigError(f"{path}.T", "required (no cost.T default given)")
        try:
            rep = attention_cost_report(row["family"], t, row["D"], r=row.get("r"),
                                        ranks=row.get("ranks"), s=row.get("s"),
                                        order=row.get("order"))
        except (ValueError, TypeError, ShapeError) as e:
            raise ConfigError(path, str(e))
        out.append({"id": row["id"], "family": row["family"],
                    "order": rep.contraction_order, "score_flops": rep.score_flops,
                    "projection_flops": rep.projection_flops, "params": rep.params,
                    "rank_bound": rep.rank_bound, "kv_cache": rep.kv_cache_elements})
    return out


def _markdown_table(columns, rows) -> str:
    def fmt(v):
        return f"{v:,}" if isinstance(v, int) else str(v)

    lines = ["| " + " | ".join(columns) + " |",
             "| " + " | ".join("---" for _ in columns) + " |"]
    for row in rows:
        lines.append("| " + " | ".join(fmt(row[c]) for c in columns) + " |")
    return "\n".join(lines)


def cmd_flops(args) -> int:
    rows = _cost_rows(_load_json(args.config))
    if args.markdown:
        print(_markdown_table(FLOPS_COLUMNS, rows))
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=FLOPS_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "flops.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=FLOPS_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    return 0


# ---------------------------------------------------------------------------
# materialization and oracle checks
# ---------------------------------------------------------------------------

_SPEC_KEYS = {"low-rank": {"family", "m", "n", "r"},
              "mlr": {"family", "m", "n", "ranks"},
              "btt": {"family", "a", "b", "c", "d", "s"},
              "mlbtc": {"family", "of"}}


def spec_from_json(doc: dict, path: str):
    if not isinstance(doc, dict) or "family" not in doc:
        raise ConfigError(path, "spec needs a 'family' key")
    family = doc["family"]
    if family not in _SPEC_KEYS:
        raise ConfigError(f"{path}.family",
                          f"unknown family {family!r}; want one of {sorted(_SPEC_KEYS)}")
    _check_keys(doc, _SPEC_KEYS[family], path)
    try:
        if family == "low-rank":
            return LowRankSpec(doc["m"], doc["n"], doc["r"])
        if family == "mlr":
            return MLRSpec.equal_blocks(doc["m"], doc["n"], tuple(doc["ranks"]))
        if family == "btt":
            return BTTSpec(doc["a"], doc["b"], doc["c"], doc["d"], doc.get("s", 1))
        inner = spec_from_json(doc["of"], f"{path}.of")
        if isinstance(inner, MLRSpec):
            return MLBTCSpec.from_mlr(inner)
        if isinstance(inner, BTTSpec):
            return MLBTCSpec.from_btt(inner)
        raise ConfigError(f"{path}.of", "mlbtc wraps an mlr or btt spec")
    except (KeyError, ValueError, TypeError, ShapeError) as e:
        raise ConfigError(path, str(e))


def _factors_for(spec, seed: int, factors_path=None):
    if factors_path is None:
        return init_factors(spec, np.random.default_rng(seed))
    try:
        return factors_from_arrays(spec, load_tensors(factors_path))
    except (ShapeError, OSError, EOFError) as e:
        raise ConfigError(str(factors_path), str(e))


def cmd_materialize(args) -> int:
    spec = spec_from_json(_load_json(args.spec), str(args.spec))
    factors = _factors_for(spec, args.seed, args.factors)
    dense = materialize(spec, factors)
    if args.compare:
        if args.factors:
            raise ConfigError("--compare", "comparisons draw both factor sets "
                                           "from --seed; drop --factors")
        other = spec_from_json(_load_json(args.compare), str(args.compare))
        other_dense = materialize(other, init_factors(other, np.random.default_rng(args.seed)))
        if other_dense.shape != dense.shape:
            raise ConfigError(str(args.compare), f"shape {other_dense.shape} does not "
                                                 f"match {dense.shape}")
        delta = float(np.max(np.abs(dense - other_dense)))
        print(f"max |delta| = {delta:.3e}")
        return 0 if delta <= ORACLE_TOL else 2
    summary = {"m": dense.shape[0], "n": dense.shape[1], "params": param_count(spec),
               "rank_bound": rank_upper_bound(spec), "numeric_rank": numeric_rank(dense)}
    print(json.dumps(summary))
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_tensors(out_dir / "dense.bin", [dense])
    return 0


def random_spec(family: str, rng: np.random.Generator):
    """A small random spec (m, n <= 16) for oracle sweeps."""
    if family == "low-rank":
        return LowRankSpec(int(rng.integers(1, 17)), int(rng.integers(1, 17)),
                           int(rng.integers(1, 7)))
    if family == "mlr":
        levels = int(rng.integers(1, 4))
        p = 2 ** (levels - 1)
        m = p * int(rng.integers(1, 16 // p + 1))
        n = p * int(rng.integers(1, 16 // p + 1))
        ranks = [int(rng.integers(1, 5)) for _ in range(levels)]
        return MLRSpec.equal_blocks(m, n, ranks)
    if family == "btt":
        a, b, c, d = (int(rng.integers(1, 5)) for _ in range(4))
        return BTTSpec(a, b, c, d, int(rng.integers(1, 3)))
    if family == "mlbtc":
        if rng.integers(2):
            return MLBTCSpec.from_mlr(random_spec("mlr", rng))
        return MLBTCSpec.from_btt(random_spec("btt", rng))
    raise ValueError(f"unknown family {family!r}")


ORACLE_FAMILIES = ("low-rank", "mlr", "btt", "mlbtc")


def oracle_sweep(family: str, trials: int, seed: int) -> float:
    """Worst |factored - dense| deviation over apply and bilinear paths."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        spec = random_spec(family, rng)
        factors = init_factors(spec, rng)
        dense = materialize(spec, factors)
        x = rng.standard_normal((spec.n, 3))
        y = rng.standard_normal((spec.m, 2))
        ax = apply(spec, factors, x).to_numpy()
        worst = max(worst, float(np.max(np.abs(ax - dense @ x))))
        bl = bilinear(spec, factors, y, x).to_numpy()
        worst = max(worst, float(np.max(np.abs(bl - y.T @ dense @ x))))
    return worst


def cmd_oracle_suite(args) -> int:
    failed = False
    for family in ORACLE_FAMILIES:
        worst = oracle_sweep(family, args.trials, args.seed)
        ok = worst <= ORACLE_TOL
        failed |= not ok
        print(f"{family:9s} {args.trials} configs: max |delta| = {worst:.3e} "
              f"[{'ok' if ok else 'FAIL'}]")
    return 2 if failed else 0


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------

def _grad_check_config(kind: str, d: int):
    if kind == "standard":
        return ScoreFunctionConfig("standard", r=d)
    if kind == "bilinear-mlr":
        ranks = (max(d // 2, 1), 1) if d % 2 == 0 else (max(d // 2, 1),)
        return ScoreFunctionConfig("bilinear-mlr", spec=MLRSpec.equal_blocks(d, d, ranks))
    if kind == "bilinear-btt":
        return ScoreFunctionConfig("bilinear-btt", spec=BTTSpec.square_root(d))
    if kind == "mlr-attention":
        return MLRAttentionConfig((d,))
    raise ConfigError("--kind", f"unknown score kind {kind!r}")


def _flatten_weights(weights: AttentionWeights):
    """tensors() plus a rebuild function for the same flat order."""
    flat = weights.tensors()

    def rebuild(ts):
        ts = list(ts)
        wv, wo = ts[0], ts[1]
        if weights.wq is not None:
            return AttentionWeights(wv, wo, wq=ts[2], wk=ts[3])
        idx = 2
        sides = []
        for side in (weights.q_blocks, weights.k_blocks):
            groups = []
            for entry in side:
                if isinstance(entry, (tuple, list)):
                    groups.append(tuple(ts[idx:idx + len(entry)]))
                    idx += len(entry)
                else:
                    groups.append(ts[idx])
                    idx += 1
            sides.append(tuple(groups))
        return AttentionWeights(wv, wo, q_blocks=sides[0], k_blocks=sides[1])

    return flat, rebuild


def gradient_check(kind: str, d: int, t: int, seed: int = 0) -> float:
    """Max relative error of taped grads vs finite differences, end to end."""
    cfg = _grad_check_config(kind, d)
    rng = np.random.default_rng(seed)
    weights = init_attention_weights(rng, d, 1, cfg)
    x = Tensor(rng.standard_normal((t, d)), requires_grad=True)
    mask = MaskSpec("causal")
    flat, rebuild = _flatten_weights(weights)

    def loss_of(x_t, tensors):
        out = attention_layer_forward(x_t, rebuild(tensors), cfg, mask)
        return tsum(out * out)

    with GradTape() as tape:
        loss = loss_of(x, flat)
    grads = backward(tape, loss)

    worst = relative_error(grads[x],
                           finite_diff_grad(lambda a: loss_of(Tensor(a), flat).item(),
                                            x.to_numpy()))
    for i, tensor in enumerate(flat):
        def f(arr, i=i):
            ts = list(flat)
            ts[i] = Tensor(arr)
            return loss_of(x, ts).item()

        worst = max(worst, relative_error(grads[tensor],
                                          finite_diff_grad(f, tensor.to_numpy())))
    return worst


def cmd_grad_check(args) -> int:
    worst = gradient_check(args.kind, args.D, args.T, args.seed)
    ok = worst < GRAD_TOL
    print(f"{args.kind} D={args.D} T={args.T}: max relative error = {worst:.3e} "
          f"[{'ok' if ok else 'FAIL'}]")
    return 0 if ok else 2


# ---------------------------------------------------------------------------
# plot-data export
# ---------------------------------------------------------------------------

PLOT_X = ("step", "flops_cumulative")
PLOT_Y = ("loss", "eval_error")


def _read_series(run_dir: Path, x: str, y: str) -> list[tuple[float, float]]:
    metrics = run_dir / "metrics.csv"
    if not metrics.exists():
        raise ConfigError(str(run_dir), "no metrics found")
    with open(metrics, newline="") as f:
        reader = csv.DictReader(f)
        for col in (x, y):
            if reader.fieldnames is None or col not in reader.fieldnames:
                raise ConfigError(str(metrics), f"no column {col!r}")
        rows = [(float(row[x]), float(row[y])) for row in reader
                if row[x] != "" and row[y] != ""]
    if not rows:
        raise ConfigError(str(metrics), "no metrics found")
    return rows


def export_plotdata(run_dirs, x: str, y: str) -> list[dict]:
    """Long-form (x, y, series) rows plus the per-x median across series."""
    series = {Path(d).name: _read_series(Path(d), x, y) for d in run_dirs}
    by_x: dict[float, list[float]] = {}
    for rows in series.values():
        for xv, yv in rows:
            by_x.setdefault(xv, []).append(yv)
    medians = {xv: float(np.median(ys)) for xv, ys in by_x.items()}
    out = []
    for name, rows in series.items():
        for xv, yv in rows:
            out.append({"x": xv, "y": yv, "series": name, "y_median": medians[xv]})
    return out


def cmd_export_plotdata(args) -> int:
    rows = export_plotdata(args.run_dirs, args.x, args.y)
    columns = ("x", "y", "series", "y_median")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        target = out_dir / "plotdata.csv"
        with open(target, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=columns)
            w.writeheader()
            w.writerows(rows)
        print(f"wrote {len(rows)} rows to {target}")
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=columns)
        w.writeheader()
        w.writerows(rows)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="structattn",
                                description="structured-attention batch tools")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, **kw)
        sp.set_defaults(func=fn)
        return sp

    sp = add("train-icl", cmd_train_icl, help="train on the regression task")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--precision", choices=("f32", "f64"))
    sp.add_argument("--out", help="run-directory root (default: runs)")

    sp = add("eval", cmd_eval, help="evaluate a trained run's final weights")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--precision", choices=("f32", "f64"),
                    help="match a run trained with the same override")
    sp.add_argument("--out", help="run-directory root (default: runs)")
    sp.add_argument("--prompts", type=int)

    sp = add("flops", cmd_flops, help="closed-form cost table for score functions")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out")
    sp.add_argument("--markdown", action="store_true")

    sp = add("grad-check", cmd_grad_check, help="taped gradients vs finite differences")
    sp.add_argument("--kind", required=True,
                    choices=("standard", "bilinear-mlr", "bilinear-btt", "mlr-attention"))
    sp.add_argument("--D", type=int, default=4)
    sp.add_argument("--T", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("materialize", cmd_materialize, help="materialize a structured spec")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--factors", help="binary factor file (default: seeded init)")
    sp.add_argument("--compare", help="second spec; report max |delta| of the two")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")

    sp = add("oracle-suite", cmd_oracle_suite,
             help="factored apply/bilinear vs dense materialization, all families")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--trials", type=int, default=50)

    sp = add("export-plotdata", cmd_export_plotdata, help="metrics as long-form CSV")
    sp.add_argument("run_dirs", nargs="+")
    sp.add_argument("--x", choices=PLOT_X, default="step")
    sp.add_argument("--y", choices=PLOT_Y, default="eval_error")
    sp.add_argument("--out")

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
