"""Command-line runner: train, ablate, report, buffer audit, data generation, gradient checks.

Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 format error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .autodiff import ParamSet, save_params
from .core import ContractError
from .data import CacheFormatError, SyntheticConfig, generate_sequence, load_cache, save_cache
from .experiments import (
    GRID_VARIANTS,
    RunSpec,
    compression_ablation,
    execute,
    extra_variant,
    run_grid,
)
from .memory import BufferFormatError, ReplayAugConfig, capacity, deserialize, read_header, record_size, serialize
from .metrics import BoundInputs, bound_table, estimate_eps, summarize
from .sampling import SamplingConfig
from .trainer import LossWeights, RunRecord, TrainConfig

log = logging.getLogger("lrd")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_FORMAT = 0, 1, 2, 3
CONFIG_VERSION = 1


class ConfigError(ContractError):
    pass


# -- configuration ---------------------------------------------------------------
@dataclass
class AblateConfig:
    dims: tuple[int, ...] = (16, 32, 64, 128)
    compression: tuple[str, ...] = ("learned", "pca", "random")
    sampling: tuple[str, ...] = ("spatial", "random", "herding", "reservoir")
    grid: bool = True
    recon: bool = True
    recon_steps: int = 4000

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.compression = tuple(self.compression)
        self.sampling = tuple(self.sampling)
        for c in self.compression:
            if c not in ("learned", "pca", "random", "none"):
                raise ConfigError(f"ablate.compression: unknown kind {c!r}")
        for m in self.sampling:
            SamplingConfig(method=m)


@dataclass
class ExperimentConfig:
    """Everything a command needs; sections mirror the library dataclasses."""

    variants: tuple[str, ...] = ("finetune", "lrd")
    out: str = "runs"
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    weights: LossWeights = field(default_factory=LossWeights)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    aug: ReplayAugConfig = field(default_factory=ReplayAugConfig)
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    version: int = CONFIG_VERSION

    def specs(self, variants=None, train: TrainConfig | None = None) -> list[RunSpec]:
        train = train or self.train
        return [
            RunSpec(v, s, train, self.weights, self.data, self.aug, self.sampling)
            for v in (variants or self.variants)
            for s in train.seeds
        ]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sampling"].pop("method")
        return d


SECTIONS = {
    "train": TrainConfig,
    "weights": LossWeights,
    "sampling": SamplingConfig,
    "aug": ReplayAugConfig,
    "data": SyntheticConfig,
    "ablate": AblateConfig,
}


def _build(cls, name: str, values):
    if not isinstance(values, dict):
        raise ConfigError(f"{name}: expected an object, got {type(values).__name__}")
    allowed = {f.name for f in fields(cls)}
    if cls is SamplingConfig:
        allowed.discard("method")  # chosen per variant; use samp-<method> variants instead
    for k in values:
        if k not in allowed:
            raise ConfigError(f"{name}.{k}: unknown key (allowed: {', '.join(sorted(allowed))})")
    base = TrainConfig.desk() if cls is TrainConfig else cls()
    merged = {**{f.name: getattr(base, f.name) for f in fields(cls)}, **values}
    try:
        return cls(**merged)
    except ContractError as e:
        raise ConfigError(f"{name}: {e}") from None
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from None


def parse_config(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if "version" not in doc:
        raise ConfigError("version: missing (expected 1)")
    if doc["version"] != CONFIG_VERSION:
        raise ConfigError(f"version: unsupported value {doc['version']!r} (expected {CONFIG_VERSION})")
    top = {"version", "variants", "out"} | set(SECTIONS)
    for k in doc:
        if k not in top:
            raise ConfigError(f"{k}: unknown key (allowed: {', '.join(sorted(top))})")
    kw = {name: _build(cls, name, doc.get(name, {})) for name, cls in SECTIONS.items()}
    variants = doc.get("variants", list(ExperimentConfig.variants))
    if not isinstance(variants, list) or not variants:
        raise ConfigError("variants: expected a non-empty list")
    for v in variants:
        try:
            extra_variant(v)
        except ContractError as e:
            raise ConfigError(f"variants: {e}") from None
    out = doc.get("out", ExperimentConfig.out)
    if not isinstance(out, str):
        raise ConfigError("out: expected a string path")
    return ExperimentConfig(tuple(variants), out, **kw)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: {e.msg}") from None
    return parse_config(doc)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _prepare(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed_override is not None:
        cfg.train.seeds = tuple(args.seed_override)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.out = str(out)
    (out / "effective_config.json").write_text(_dump(cfg.to_dict()))
    return cfg, out


# -- train -----------------------------------------------------------------------
def checkpoint_params(params: ParamSet) -> ParamSet:
    """Rename task embeddings to ``task_emb/<t>`` for the checkpoint container."""
    out = ParamSet()
    for k, v in params.items():
        parts = k.split("/")
        if parts[0] == "film" and parts[-1] == "emb":
            out[f"task_emb/{parts[1][1:]}"] = v
        else:
            out[k] = v
    return out


def _train_one(spec: RunSpec):
    rec, state = execute(spec)
    buf = io.BytesIO()
    save_params(checkpoint_params(state.params), buf)
    return rec.to_json(), serialize(state.bank), buf.getvalue()


def run_name(variant: str, seed: int) -> str:
    return f"{variant}_seed{seed}"


def cmd_train(args) -> int:
    cfg, out = _prepare(args)
    specs = cfg.specs()
    if args.jobs > 1 and len(specs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_train_one, specs))
    else:
        results = [_train_one(s) for s in specs]
    for spec, (text, bank, params) in zip(specs, results):
        name = run_name(spec.variant, spec.seed)
        (out / f"{name}.json").write_text(text + "\n")
        (out / f"{name}.lrdb").write_bytes(bank)
        (out / f"{name}.params").write_bytes(params)
        s = json.loads(text)["summary"]
        print(f"{name}: final mAP {s['final_map']:.3f} forgetting {s['forgetting']:.3f}")
    return EXIT_OK


# -- ablate ----------------------------------------------------------------------
ABLATE_COLUMNS = ("section", "name", "seeds", "latent_dim", "record_bytes", "capacity",
                  "final_map_mean", "final_map_std", "forgetting_mean", "forgetting_std",
                  "loc_drift_mean", "loc_drift_std", "recon_mse_mean", "recon_mse_std")


def _stats(vals) -> tuple[float, float]:
    a = np.asarray(vals, dtype=np.float64)
    return float(a.mean()), float(a.std())


def _metric_cells(records: list[RunRecord]) -> dict:
    row = {"seeds": len(records)}
    for k in ("final_map", "forgetting", "loc_drift"):
        row[f"{k}_mean"], row[f"{k}_std"] = _stats([r.summary[k] for r in records])
    return row


GRID_ROWS = (
    ("both", "lrd"),
    ("task_adaptive_only", "lrd-spatialdiverse"),
    ("spatial_diverse_only", "lrd-taskadaptive"),
    ("neither", "lrd-both"),
)


def ablation_rows(cfg: ExperimentConfig, cache_dir=None, jobs: int = 1) -> list[dict]:
    a = cfg.ablate
    seeds = cfg.train.seeds
    rows = []

    def grid(variants, train=None):
        recs = run_grid(cfg.specs(variants, train), cache_dir, jobs)
        return {v: [recs[(v, s)] for s in seeds] for v in variants}

    for d in a.dims:
        train = TrainConfig(**{**asdict(cfg.train), "latent_dim": d})
        recs = grid(["lrd"], train)["lrd"]
        rows.append({"section": "dimension", "name": f"d={d}", "latent_dim": d, "record_bytes": record_size(d),
                     "capacity": capacity(train.budget_bytes, d), **_metric_cells(recs)})
    if a.compression:
        names = [f"comp-{c}" for c in a.compression]
        for n, recs in grid(names).items():
            rows.append({"section": "compression", "name": n[5:], **_metric_cells(recs)})
    if a.recon:
        res = compression_ablation(seeds, steps=a.recon_steps)
        for m in res.methods:
            mean, std = _stats([e[m] for e in res.errors])
            rows.append({"section": "compression_recon", "name": m, "seeds": len(seeds),
                         "recon_mse_mean": mean, "recon_mse_std": std})
    if a.sampling:
        names = [f"samp-{m}" for m in a.sampling]
        for n, recs in grid(names).items():
            rows.append({"section": "sampling", "name": n[5:], **_metric_cells(recs)})
    if a.grid:
        recs = grid([v for _, v in GRID_ROWS])
        for label, v in GRID_ROWS:
            rows.append({"section": "grid2x2", "name": label, **_metric_cells(recs[v])})
    return rows


def rows_to_csv(rows: list[dict], columns=ABLATE_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: _fmt(r.get(c, "")) for c in columns})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def cmd_ablate(args) -> int:
    cfg, out = _prepare(args)
    rows = ablation_rows(cfg, cache_dir=out / "cache", jobs=args.jobs)
    (out / "ablation.csv").write_text(rows_to_csv(rows))
    print(f"wrote {out / 'ablation.csv'} ({len(rows)} rows)")
    return EXIT_OK


# -- report ----------------------------------------------------------------------
class MissingRunsError(ContractError):
    pass


def load_runs(run_dir: Path) -> dict[tuple[str, int], RunRecord]:
    cfg_path = run_dir / "effective_config.json"
    expected = None
    if cfg_path.exists():
        doc = json.loads(cfg_path.read_text())
        expected = [(v, int(s)) for v in doc["variants"] for s in doc["train"]["seeds"]]
    found = {}
    for p in sorted(run_dir.glob("*_seed*.json")):
        r = RunRecord.from_json(p.read_text())
        found[(r.variant, r.seed)] = r
    if expected is not None:
        missing = [run_name(v, s) for v, s in expected if (v, s) not in found]
        if missing:
            raise MissingRunsError(f"missing runs: {', '.join(missing)}")
    if not found:
        raise MissingRunsError(f"no run records in {run_dir}")
    return found


def progression(records: list[RunRecord]) -> list[list[float]]:
    """Seed-averaged accuracy matrix (rows: after training task i; cols: task j)."""
    R = np.mean([np.asarray(r.R, dtype=np.float64) for r in records], axis=0)
    return R.tolist()


def report_files(runs: dict[tuple[str, int], RunRecord], lr: float = 1e-4, rho: float = 0.5) -> dict[str, str]:
    by_var: dict[str, list[RunRecord]] = {}
    for (v, _), r in sorted(runs.items()):
        by_var.setdefault(v, []).append(r)
    summary_rows, prog_rows, bound_rows = [], [], []
    for v, recs in by_var.items():
        row = {"variant": v, "seeds": len(recs)}
        for k in ("final_map", "forgetting", "bwt", "fwt", "loc_drift"):
            row[f"{k}_mean"], row[f"{k}_std"] = _stats([r.summary[k] for r in recs])
        summary_rows.append(row)
        R = progression(recs)
        for i, rowR in enumerate(R):
            for j, val in enumerate(rowR):
                prog_rows.append({"variant": v, "after_task": i, "task": j, "map": val})
        # bound inputs from the run itself: M = final buffer size, T = tasks; needs a buffer
        T = recs[0].summary["T"]
        M = int(np.mean([r.summary["buffer_records"] for r in recs]))
        if M > 0:
            bound_rows.append({"source": v, **bound_table(BoundInputs(eps=0.1, T=T, M=M, eta=lr, rho=rho))})
    bound_rows.insert(0, {"source": "example", **bound_table(BoundInputs(eps=0.1, T=4, M=400, eta=1e-4))})
    files = {
        "summary.csv": rows_to_csv(summary_rows, list(summary_rows[0])),
        "progression.csv": rows_to_csv(prog_rows, ["variant", "after_task", "task", "map"]),
        "bounds.csv": rows_to_csv(bound_rows, list(bound_rows[0])),
    }
    md = ["# Run report", "", "## Continual-learning metrics (mean ± std over seeds)", "",
          "| variant | seeds | final mAP | forgetting | BWT | FWT | loc. drift |", "|---|---|---|---|---|---|---|"]
    for r in summary_rows:
        cells = " | ".join(f"{r[k + '_mean']:.3f} ± {r[k + '_std']:.3f}"
                           for k in ("final_map", "forgetting", "bwt", "fwt", "loc_drift"))
        md.append(f"| {r['variant']} | {r['seeds']} | {cells} |")
    md += ["", "## Task-0 mAP after each task", "", "| variant | " + " | ".join(
        f"t{i}" for i in range(len(progression(next(iter(by_var.values())))))) + " |"]
    md.append("|---" * (1 + len(progression(next(iter(by_var.values()))))) + "|")
    for v, recs in by_var.items():
        md.append(f"| {v} | " + " | ".join(f"{row[0]:.3f}" for row in progression(recs)) + " |")
    md += ["", "## Bound evaluators", "", "| source | eps | T | M | forgetting bound | convergence iters | IoU drift bound |",
           "|---|---|---|---|---|---|---|"]
    for b in bound_rows:
        md.append(f"| {b['source']} | {b['eps']} | {b['T']} | {b['M']} | {b['forgetting_bound']:.5f} | "
                  f"{b['convergence_iters']:.4g} | {b['iou_drift_bound']:.5f} |")
    files["report.md"] = "\n".join(md) + "\n"
    return files


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    runs = load_runs(run_dir)
    lr, rho = 1e-4, 0.5
    cfg_path = run_dir / "effective_config.json"
    if cfg_path.exists():
        t = json.loads(cfg_path.read_text())["train"]
        lr, rho = t["lr"], t["replay_ratio"]
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    for name, text in report_files(runs, lr, rho).items():
        (out / name).write_text(text)
    print(f"wrote report for {len(runs)} runs to {out}")
    return EXIT_OK


# -- buffer audit ----------------------------------------------------------------
def inspect_buffer(data: bytes) -> dict:
    version, d, count = read_header(data)
    bank = deserialize(data)
    per_task = {str(k): v for k, v in bank.per_task().items()}
    per_cell = {f"{r},{c}": v for (r, c), v in bank.per_cell().items()}
    per_scale: dict[str, int] = {}
    per_class: dict[str, int] = {}
    for rec in bank.records:
        per_scale[rec.scale.name.lower()] = per_scale.get(rec.scale.name.lower(), 0) + 1
        per_class[str(rec.cls)] = per_class.get(str(rec.cls), 0) + 1
    return {
        "header": {"version": version, "latent_dim": d, "records": count, "record_bytes": record_size(d),
                   "bytes": len(data)},
        "histograms": {"task": per_task, "cell": per_cell, "scale": dict(sorted(per_scale.items())),
                       "class": dict(sorted(per_class.items(), key=lambda kv: int(kv[0])))},
        "records": [
            {"i": i, "task": r.task, "class": r.cls, "bbox": [round(v, 6) for v in r.bbox.as_tuple()],
             "cell": [r.grid.row, r.grid.col], "scale": r.scale.name.lower(),
             "z_norm": round(float(np.linalg.norm(r.z.astype(np.float64))), 6)}
            for i, r in enumerate(bank.records)
        ],
    }


def format_inspection(info: dict, max_records: int = 20) -> str:
    h = info["header"]
    lines = [f"LRDB v{h['version']}  d={h['latent_dim']}  records={h['records']}  "
             f"record_bytes={h['record_bytes']}  file_bytes={h['bytes']}"]
    for name, hist in info["histograms"].items():
        lines.append(f"{name}: " + "  ".join(f"{k}={v}" for k, v in hist.items()) + f"  (total {sum(hist.values())})")
    for r in info["records"][:max_records]:
        lines.append(f"  #{r['i']:4d} task {r['task']} class {r['class']} cell {tuple(r['cell'])} {r['scale']:6s} "
                     f"bbox {r['bbox']} |z|={r['z_norm']:.4f}")
    if len(info["records"]) > max_records:
        lines.append(f"  ... {len(info['records']) - max_records} more")
    return "\n".join(lines) + "\n"


def cmd_inspect_buffer(args) -> int:
    print(format_inspection(inspect_buffer(Path(args.file).read_bytes()), args.max_records), end="")
    return EXIT_OK


def cmd_export_buffer(args) -> int:
    data = Path(args.file).read_bytes()
    info = inspect_buffer(data)
    bank = deserialize(data)
    for r, rec in zip(info["records"], bank.records):
        r["z"] = [float(v) for v in rec.z]
    text = _dump(info)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- data and gradient checks -------------------------------------------------------
def cmd_gen_data(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    out = Path(args.out or "synthetic.lrds")
    tasks = generate_sequence(cfg.data)
    save_cache(tasks, out)
    back = load_cache(out)
    n = sum(len(t.train) + len(t.test) for t in back)
    print(f"wrote {out}: {len(back)} tasks, {n} images")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import run_checks

    seeds = args.seed_override if args.seed_override is not None else range(args.seeds)
    reports = run_checks(seeds, args.tolerance, composites=not args.primitives_only)
    ok = True
    for name, r in reports.items():
        ok &= r.ok
        print(f"{name:24s} max rel err {r.max_error:.2e}  {'ok' if r.ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_RUNTIME


# -- entry point ------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lrd", description="Latent replay detection experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON experiment config (version 1)")
        sp.add_argument("--out", help="output directory or file")
        sp.add_argument("--jobs", type=int, default=1, help="parallel runs")
        sp.add_argument("--seed-override", type=int, nargs="+", help="replace the configured seeds")

    sp = sub.add_parser("train", help="train every configured variant and seed")
    common(sp)
    sp.set_defaults(fn=cmd_train)
    sp = sub.add_parser("ablate", help="dimension/compression/sampling/2x2 ablation CSV")
    common(sp)
    sp.set_defaults(fn=cmd_ablate)
    sp = sub.add_parser("report", help="markdown and CSV report for a run directory")
    sp.add_argument("run_dir")
    common(sp, config=False)
    sp.set_defaults(fn=cmd_report)
    sp = sub.add_parser("inspect-buffer", help="summarise an LRDB buffer file")
    sp.add_argument("file")
    sp.add_argument("--max-records", type=int, default=20)
    sp.set_defaults(fn=cmd_inspect_buffer)
    sp = sub.add_parser("export-buffer", help="dump an LRDB buffer file as JSON")
    sp.add_argument("file")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_export_buffer)
    sp = sub.add_parser("gen-data", help="write the synthetic dataset as an LRDS cache")
    common(sp)
    sp.set_defaults(fn=cmd_gen_data)
    sp = sub.add_parser("grad-check", help="finite-difference check of every primitive and loss")
    common(sp, config=False)
    sp.add_argument("--seeds", type=int, default=20)
    sp.add_argument("--tolerance", type=float, default=1e-3)
    sp.add_argument("--primitives-only", action="store_true")
    sp.set_defaults(fn=cmd_grad_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (BufferFormatError, CacheFormatError) as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingRunsError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ContractError as e:
        # contract violations raised while validating inputs are configuration problems
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - the CLI maps every failure to an exit code
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
