"""Experiment runner: config parsing, ablation presets, reports and comparisons."""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import datagen, snapshot
from .amplify import SCHEMES, AmplifyConfig
from .datagen import Benchmark, SyntheticSpec
from .errors import ComparisonError, ConfigurationError
from .losses import LossWeights
from .model import ExtractorConfig, LRSchedule
from .protocol import ABLATION_MODES, BaseConfig, MetricsReport, SessionConfig, run_base_session, run_benchmark

PRESETS = {
    "ensemble": ["naive", "no-we", "dual-we-old", "dual-we-base", "tri-we"],
    "amplify": ["tri-we:none", "tri-we:cutout", "tri-we:mixup", "tri-we:cutmix"],
    "adkd-terms": ["tri-we:nologit", "tri-we:nofeat", "tri-we"],
    "cls-old": ["tri-we:noclsold", "tri-we", "tri-we:frozen+noclsold", "tri-we:frozen"],
}
# switches that can follow a mode after ':' (joined with '+'), besides an amplification scheme
FLAG_VARIANTS = ("nokd", "nofeat", "nologit", "noclsold", "frozen")
CSV_COLUMNS = ["mode", "seed", "session", "acc", "base_acc", "new_acc", "hm", "avg_acc"]

# ResNet18-scale miniImageNet average accuracy (%), shown next to desk-scale results
REFERENCE_AVG_ACC = {
    "naive": 51.55, "no-we": 67.92, "dual-we-old": 69.31, "dual-we-base": 68.54, "tri-we": 70.62,
    "tri-we:none": 69.05, "tri-we:cutout": 69.13, "tri-we:mixup": 70.03, "tri-we:cutmix": 70.62,
    "tri-we:nologit": 70.01, "tri-we:nofeat": 68.41, "tri-we:noclsold": 70.15,
    "tri-we:frozen+noclsold": 69.41, "tri-we:frozen": 69.40,
}


@dataclass
class ExperimentConfig:
    benchmark: dict | None = field(default_factory=lambda: asdict(SyntheticSpec()))
    dataset_path: str | None = None
    modes: list[str] = field(default_factory=lambda: ["naive", "no-we", "tri-we", "tri-we:none"])
    amplify_scheme: str = "cutmix"
    amplify_factor: int = 16
    beta_a: float = 1.0
    gamma1: float = 1.2
    gamma2: float = 10.0
    lr_fast: float = 0.1
    lr_slow: float = 0.001
    naive_lr: float = 0.1
    momentum: float = 0.9
    base_lr: float = 0.01
    base_milestones: list[int] = field(default_factory=lambda: [60, 70])
    base_gamma: float = 0.1
    base_epochs: int = 80
    base_batch_size: int = 64
    incremental_epochs: int = 20
    incremental_batch_size: int | None = None
    scale: float = 16.0
    alpha_init: float = 1.0
    fixed_alphas: list[float] | None = None
    kd_feat: bool = True
    kd_logit: bool = True
    extractor_kind: str = "mlp"
    hidden_widths: list[int] = field(default_factory=lambda: [128, 64])
    feature_dim: int = 32
    geo_types: int = 4
    geo_weight: float = 1.0
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = "runs/default"
    save_checkpoints: bool = False

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigurationError(f"field {unknown[0]!r}: unknown config key")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigurationError("config must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        def bad(name, why):
            raise ConfigurationError(f"field {name!r}: {why}")

        for name in ("lr_fast", "lr_slow", "naive_lr", "base_lr", "gamma1", "gamma2", "alpha_init"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or v < 0:
                bad(name, "must be a non-negative number")
        if not 0 <= self.momentum < 1:
            bad("momentum", "must lie in [0, 1)")
        if not self.seeds or not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            bad("seeds", "need at least one non-negative integer seed")
        if (self.benchmark is None) == (self.dataset_path is None):
            bad("benchmark", "give exactly one of 'benchmark' and 'dataset_path'")
        if self.benchmark is not None:
            try:
                SyntheticSpec(**self.benchmark).validate()
            except TypeError as exc:
                bad("benchmark", str(exc))
            except ConfigurationError as exc:
                bad("benchmark", str(exc))
        if self.amplify_scheme not in SCHEMES:
            bad("amplify_scheme", f"must be one of {SCHEMES}")
        if not isinstance(self.amplify_factor, int) or self.amplify_factor < 1:
            bad("amplify_factor", "must be a positive integer")
        if self.beta_a <= 0:
            bad("beta_a", "must be positive")
        if self.scale <= 0:
            bad("scale", "must be positive")
        for name in ("base_epochs", "incremental_epochs"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 0:
                bad(name, "must be a non-negative integer")
        if self.fixed_alphas is not None and (len(self.fixed_alphas) != 2 or min(self.fixed_alphas) < 0):
            bad("fixed_alphas", "must be null or two non-negative numbers")
        if not self.modes:
            bad("modes", "need at least one mode")
        for m in expand_modes(self.modes):
            try:
                parse_mode(m)
            except ConfigurationError as exc:
                bad("modes", str(exc))
        try:
            self.extractor_config().validate()
        except ConfigurationError as exc:
            bad("extractor", str(exc))

    def extractor_config(self) -> ExtractorConfig:
        spec = self.synthetic_spec()
        h, w, c = (spec.h, spec.w, spec.c) if spec else (8, 8, 1)
        return ExtractorConfig(h, w, c, self.extractor_kind, list(self.hidden_widths), self.feature_dim)

    def synthetic_spec(self) -> SyntheticSpec | None:
        return SyntheticSpec(**self.benchmark) if self.benchmark is not None else None

    def base_config(self, image_shape: tuple[int, int, int]) -> BaseConfig:
        h, w, c = image_shape
        ext = ExtractorConfig(h, w, c, self.extractor_kind, list(self.hidden_widths), self.feature_dim)
        return BaseConfig(ext, self.base_epochs, LRSchedule(self.base_lr, tuple(self.base_milestones), self.base_gamma),
                          self.base_batch_size, self.geo_types, self.geo_weight, self.momentum)

    def session_config(self, mode_label: str) -> SessionConfig:
        mode, variants = parse_mode(mode_label)
        gamma2 = 0.0 if "nokd" in variants else self.gamma2
        amp = AmplifyConfig(self.amplify_scheme, self.amplify_factor, self.beta_a)
        for scheme in variants:
            if scheme in SCHEMES:
                amp = AmplifyConfig(scheme, 1 if scheme == "none" else self.amplify_factor, self.beta_a)
        return SessionConfig(
            mode=mode, amplify=amp, weights=LossWeights(self.gamma1, gamma2), lr_fast=self.lr_fast,
            lr_slow=self.lr_slow, naive_lr=self.naive_lr, momentum=self.momentum, epochs=self.incremental_epochs,
            batch_size=self.incremental_batch_size, alpha_init=self.alpha_init,
            fixed_alphas=tuple(self.fixed_alphas) if self.fixed_alphas is not None else None,
            kd_feat=self.kd_feat and "nofeat" not in variants, kd_logit=self.kd_logit and "nologit" not in variants,
            cls_old="noclsold" not in variants, update_extractor="frozen" not in variants)


def expand_modes(modes: list[str]) -> list[str]:
    out: list[str] = []
    for m in modes:
        for item in PRESETS.get(m, [m]):
            if item not in out:
                out.append(item)
    return out


def parse_mode(label: str) -> tuple[str, tuple[str, ...]]:
    """'tri-we' -> ('tri-we', ()); 'tri-we:frozen+noclsold' -> ('tri-we', ('frozen', 'noclsold'))."""
    mode, _, rest = label.partition(":")
    if mode not in ABLATION_MODES:
        raise ConfigurationError(f"unknown mode {mode!r}; expected one of {list(ABLATION_MODES)} or a preset")
    variants = tuple(rest.split("+")) if rest else ()
    for v in variants:
        if v not in SCHEMES + FLAG_VARIANTS:
            raise ConfigurationError(f"unknown variant {v!r} in {label!r}")
    if sum(v in SCHEMES for v in variants) > 1:
        raise ConfigurationError(f"at most one amplification scheme per mode, got {label!r}")
    return mode, variants


def load_benchmark(cfg: ExperimentConfig) -> Benchmark:
    if cfg.dataset_path is not None:
        return datagen.load(cfg.dataset_path)
    return datagen.generate(cfg.synthetic_spec())


def _report_dict(report: MetricsReport) -> dict:
    return {
        "sessions": [asdict(s) for s in report.sessions],
        "avg_acc": report.avg_acc,
        "base_drop": report.base_drop,
        "alphas": [list(a) if a is not None else None for a in report.alphas],
        "buffer_sizes": report.buffer_sizes,
    }


def _checkpoint(state) -> dict[str, np.ndarray]:
    arrays = {name: arr for name, arr in state.extractor.state().items()}
    arrays["head.phi"] = state.deployed.weight
    arrays["head.phi0"] = state.phi0
    return arrays


def run_seed(cfg: ExperimentConfig, seed: int, bench: Benchmark | None = None, out_dir: Path | None = None) -> dict:
    """Run every configured mode for one seed; the base session is shared."""
    bench = load_benchmark(cfg) if bench is None else bench
    base = cfg.base_config(bench.image_shape)
    base_result = run_base_session(bench, base, seed, cfg.scale)
    modes = {}
    for label in expand_modes(cfg.modes):
        report, final = run_benchmark(bench, base, cfg.session_config(label), seed, base_result, cfg.scale)
        expected = [bench.n_seen(t) for t in range(bench.sessions + 1)]
        if report.buffer_sizes != expected:
            raise AssertionError(f"{label}: buffer sizes {report.buffer_sizes} != {expected}")
        modes[label] = _report_dict(report)
        if cfg.save_checkpoints and out_dir is not None:
            ckpt = out_dir / "checkpoints"
            ckpt.mkdir(parents=True, exist_ok=True)
            snapshot.save(ckpt / f"seed{seed}_{label.replace(':', '_')}_final.fsw", _checkpoint(final))
    return {
        "seed": seed,
        "benchmark_hash": bench.digest(),
        "config": cfg.to_dict(),
        "invariants": {"buffer_size_equals_seen_classes": True, "teacher_snapshots_unchanged": True,
                       "session_classes_disjoint": True},
        "modes": modes,
    }


def _run_seed_job(args):
    cfg_dict, seed, out_dir = args
    return run_seed(ExperimentConfig.from_dict(cfg_dict), seed, out_dir=Path(out_dir))


def csv_rows(reports: list[dict]) -> list[list]:
    rows = []
    modes = list(reports[0]["modes"]) if reports else []
    for mode in modes:
        for rep in reports:
            m = rep["modes"][mode]
            for s in m["sessions"]:
                rows.append([mode, rep["seed"], s["session"], s["acc"], s["base_acc"], s["new_acc"], s["hm"],
                             m["avg_acc"]])
    return rows


def write_csv(path: Path, reports: list[dict]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in csv_rows(reports):
        writer.writerow([f"{v:.10f}" if isinstance(v, float) else v for v in row])
    path.write_text(buf.getvalue())


def worker_count(n_jobs: int) -> int:
    cap = os.environ.get("FSCIL_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, n_jobs))


def run(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> list[dict]:
    """Run all seeds, write report_seed<N>.json files and results.csv; return the reports."""
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = worker_count(len(cfg.seeds))
    if workers > 1:
        jobs = [(cfg.to_dict(), s, str(out)) for s in cfg.seeds]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_run_seed_job, jobs))
    else:
        bench = load_benchmark(cfg)
        reports = [run_seed(cfg, s, bench, out) for s in cfg.seeds]
    for rep in reports:
        (out / f"report_seed{rep['seed']}.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    write_csv(out / "results.csv", reports)
    return reports


# --- comparison ----------------------------------------------------------

@dataclass
class Ordering:
    scope: str  # "seed <n>" or "mean"
    ranked: list[tuple[str, float]]

    def statements(self, tol: float = 0.0) -> list[str]:
        out = []
        for (a, va), (b, vb) in zip(self.ranked, self.ranked[1:]):
            margin = va - vb
            out.append(f"{a} = {b}" if margin <= tol else f"{a} > {b} (margin {margin:.4f})")
        return out

    @property
    def all_tied(self) -> bool:
        return all(va == vb for (_, va), (_, vb) in zip(self.ranked, self.ranked[1:]))


@dataclass
class Comparison:
    per_seed: list[Ordering]
    mean: Ordering
    flags: dict[str, bool | None]

    def render(self) -> str:
        lines = []
        for o in self.per_seed + [self.mean]:
            lines.append(f"[{o.scope}] " + "; ".join(o.statements() or ["(single entry)"]))
        for k, v in self.flags.items():
            lines.append(f"{k}: {'n/a' if v is None else v}")
        ref = [f"{m} {REFERENCE_AVG_ACC[m]:.2f}" for m, _ in self.mean.ranked if m in REFERENCE_AVG_ACC]
        if ref:
            lines.append("miniImageNet reference avg acc (%): " + ", ".join(ref))
        return "\n".join(lines)


def _load_report(path) -> dict:
    return json.loads(Path(path).read_text()) if not isinstance(path, dict) else path


def compare(paths: list) -> Comparison:
    """Rank runs by average accuracy per seed and on the mean over seeds."""
    reports = [_load_report(p) for p in paths]
    if len(reports) < 2:
        raise ComparisonError("need at least two reports")
    hashes = {r["benchmark_hash"] for r in reports}
    if len(hashes) != 1:
        raise ComparisonError("reports were produced on different benchmarks")
    names = [Path(p).stem if not isinstance(p, dict) else f"report{i}" for i, p in enumerate(paths)]
    entries: dict[int, list[tuple[str, str, float]]] = {}
    for name, rep in zip(names, reports):
        for mode, m in rep["modes"].items():
            entries.setdefault(rep["seed"], []).append((name, mode, m["avg_acc"]))

    def label(name, mode, seed_entries):
        clash = sum(1 for _, md, _ in seed_entries if md == mode) > 1
        return f"{name}:{mode}" if clash else mode

    per_seed, pooled = [], {}
    for seed in sorted(entries):
        ranked = [(label(n, m, entries[seed]), v) for n, m, v in entries[seed]]
        for lbl, v in ranked:
            pooled.setdefault(lbl, []).append(v)
        per_seed.append(Ordering(f"seed {seed}", sorted(ranked, key=lambda kv: (-kv[1], kv[0]))))
    mean = Ordering("mean", sorted(((k, float(np.mean(v))) for k, v in pooled.items()), key=lambda kv: (-kv[1], kv[0])))
    means = dict(mean.ranked)

    def beats(a, b, strict):
        if a not in means or b not in means:
            return None
        return means[a] > means[b] if strict else means[a] >= means[b]

    with_ad = "tri-we:cutmix" if "tri-we:cutmix" in means else "tri-we"
    flags = {
        "tri-we > naive": beats("tri-we", "naive", True),
        "with-ADKD >= without-ADKD": beats(with_ad, "tri-we:none", False),
    }
    return Comparison(per_seed, mean, flags)
