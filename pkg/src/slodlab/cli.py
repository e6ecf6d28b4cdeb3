"""Experiment orchestration: config ingestion, presets, caching, and file emission.

Subcommands: `basis` (build and cache one basis), `solve` (one method at one
configuration point), `study` (coarse-size sweep emitting convergence CSVs),
`decay` (oversampling sweep emitting a decay fit), `report` (sigma, Riesz and
eigenvalue-decay CSVs). Configs are JSON files; command-line flags override
file keys. Exit status: 0 full success, 1 config error, 2 partial failures.
"""

from __future__ import annotations

import argparse
import csv as csv_module
import hashlib
import json
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import analysis, basis as basis_mod, fem, solvers
from .mesh import build_grid, build_nesting


class ConfigError(ValueError):
    """Invalid experiment configuration."""


# ---------------------------------------------------------------------------
# right-hand sides


def f_one(points):
    return np.ones(len(points))


def f_sin_cos(points):
    out = np.sin(np.pi * points[:, 0])
    if points.shape[1] > 1:
        out = out * np.cos(np.pi * points[:, 1])
    return out


def resolve_f(descriptor, dim):
    """Named builtin ('one', 'sin_cos') or piecewise-constant table descriptor."""
    if descriptor == "one":
        return f_one
    if descriptor == "sin_cos":
        return f_sin_cos
    if isinstance(descriptor, dict) and descriptor.get("kind") == "p0_table":
        from .projection import P0Function

        path = Path(descriptor["path"])
        values = []
        with open(path, newline="") as handle:
            reader = csv_module.reader(handle)
            header = next(reader)
            value_col = header.index("value")
            for row in reader:
                values.append(float(row[value_col]))
        n = round(len(values) ** (1.0 / dim))
        if n**dim != len(values):
            raise ConfigError(
                f"p0_table at {path} has {len(values)} rows, not a {dim}-d cube count"
            )
        return P0Function(coarse_grid=build_grid(dim, n), values=np.asarray(values))
    raise ConfigError(f"unknown f descriptor {descriptor!r}")


# ---------------------------------------------------------------------------
# configuration


def _to_cells(value, name):
    """Accept a mesh size (0 < v < 1) or a cell count (integer >= 2)."""
    if isinstance(value, (int, np.integer)) and value >= 2:
        return int(value)
    v = float(value)
    if 0.0 < v < 1.0:
        n = round(1.0 / v)
        if abs(n * v - 1.0) > 1e-9:
            raise ConfigError(f"{name}: mesh size {value} is not 1/integer")
        return n
    raise ConfigError(f"{name}: expected a cell count >= 2 or a mesh size in (0,1), got {value}")


@dataclass
class ExperimentConfig:
    dim: int = 2
    epsilon: float = 2.0**-5
    velocity: dict = field(default_factory=lambda: {"kind": "constant", "vector": [1.0, 1.0]})
    f: object = "one"
    coarse_sizes: list = field(default_factory=lambda: [8])
    fine_size: object = 64
    ells: list = field(default_factory=lambda: [1])
    p: float = 1.5
    p_w: float = 2.0
    methods: list = field(default_factory=lambda: ["slod", "fem"])
    solver_tol: float = 1e-10
    output_dir: str = "out"
    cache: bool = True
    workers: int = 1
    allow_full_domain: bool = False

    def validate(self):
        if self.dim not in (1, 2, 3):
            raise ConfigError(f"dim: must be 1, 2 or 3, got {self.dim}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon: must be positive, got {self.epsilon}")
        fine_n = _to_cells(self.fine_size, "fine_size")
        coarse_ns = [_to_cells(v, "coarse_sizes") for v in self.coarse_sizes]
        for n in coarse_ns:
            if fine_n % n != 0:
                raise ConfigError(
                    f"coarse_sizes: fine grid ({fine_n} cells) does not refine "
                    f"coarse grid ({n} cells)"
                )
        if not self.ells or any(int(l) < 1 for l in self.ells):
            raise ConfigError(f"ells: need a list of integers >= 1, got {self.ells}")
        bad = set(self.methods) - set(analysis.ALL_METHODS)
        if bad:
            raise ConfigError(f"methods: unknown {sorted(bad)}")
        if self.workers < 1:
            raise ConfigError(f"workers: must be >= 1, got {self.workers}")
        return fine_n, coarse_ns

    def velocity_field(self):
        try:
            return fem.velocity_from_descriptor(self.velocity)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"velocity: {exc}") from exc

    def canonical(self):
        data = asdict(self)
        data["fine_size"] = _to_cells(self.fine_size, "fine_size")
        data["coarse_sizes"] = [_to_cells(v, "coarse_sizes") for v in self.coarse_sizes]
        data["ells"] = [int(l) for l in self.ells]
        return data

    def hash(self):
        return hashlib.sha256(
            json.dumps(self.canonical(), sort_keys=True).encode()
        ).hexdigest()[:16]


PRESETS = {
    "fig4": dict(
        dim=2, epsilon=2.0**-7,
        velocity={"kind": "constant", "vector": [float(np.cos(0.7)), float(np.sin(0.7))]},
        f="one", fine_size=2**10, coarse_sizes=[4, 8, 16, 32, 64],
        ells=[1, 2, 3, 4], methods=["slod", "fem", "supg"],
    ),
    "fig5": dict(
        dim=2, epsilon=2.0**-7,
        velocity={"kind": "constant", "vector": [float(np.cos(0.7)), float(np.sin(0.7))]},
        f="one", fine_size=2**10, coarse_sizes=[16], ells=[1, 2, 3, 4],
        methods=["slod"],
    ),
    "fig6": dict(
        dim=2, epsilon=2.0**-7, velocity={"kind": "rotational"},
        f="sin_cos", fine_size=2**10, coarse_sizes=[4, 8, 16, 32, 64],
        ells=[1, 2, 3], methods=["slod", "slod_galerkin", "fem", "supg"],
    ),
    "fig9": dict(
        dim=3, epsilon=2.0**-5,
        velocity={"kind": "constant", "vector": [float(np.pi / 4)] * 3},
        f="one", fine_size=2**6, coarse_sizes=[4, 8, 16], ells=[1, 2],
        methods=["slod", "fem", "supg"], allow_full_domain=True,
    ),
}


def preset_config(name, full=False, scale_h=2, scale_eps=2):
    """Materialize a named experiment; desk scale coarsens h and enlarges eps."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    data = dict(PRESETS[name])
    if not full:
        data["fine_size"] = max(4, int(data["fine_size"]) >> scale_h)
        data["epsilon"] = data["epsilon"] * 2.0**scale_eps
    config = ExperimentConfig(**data)
    fine_n = _to_cells(config.fine_size, "fine_size")
    kept = [n for n in config.coarse_sizes if fine_n // _to_cells(n, "coarse_sizes") >= 2]
    config.coarse_sizes = kept
    return config


# ---------------------------------------------------------------------------
# caching


def basis_cache_path(cache_dir, key):
    digest = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:20]
    return Path(cache_dir) / f"basis_{digest}.npz"


def load_or_build_basis(config, coarse_n, ell, cache_dir=None):
    fine_n = _to_cells(config.fine_size, "fine_size")
    velocity = config.velocity_field()
    key = basis_mod.basis_key(config.dim, coarse_n, fine_n, config.epsilon,
                              velocity.descriptor(), ell, config.p, config.p_w)
    path = basis_cache_path(cache_dir, key) if cache_dir else None
    if path is not None and path.exists():
        return basis_mod.load_basis(path, key), path, True
    built = basis_mod.build_basis(
        build_grid(config.dim, coarse_n), build_grid(config.dim, fine_n),
        config.epsilon, velocity, ell, p=config.p, p_w=config.p_w,
        workers=config.workers, allow_full_domain=config.allow_full_domain,
    )
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        basis_mod.save_basis(built, path)
    return built, path, False


def cache_roundtrip(basis, path=None):
    """Write a basis to its cache file and read it back (bitwise identical)."""
    key = basis_mod.key_of_basis(basis)
    if path is None:
        handle = tempfile.NamedTemporaryFile(suffix=".npz", delete=False)
        path = handle.name
        handle.close()
    basis_mod.save_basis(basis, path)
    return basis_mod.load_basis(path, key)


# ---------------------------------------------------------------------------
# manifest and emission


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


class Manifest:
    def __init__(self, config):
        self.data = {
            "config": config.canonical(),
            "config_hash": config.hash(),
            "files": [],
            "failures": [],
        }

    def add_file(self, path):
        self.data["files"].append({"path": str(path), "sha256": _sha256(path)})

    def add_failures(self, failures):
        self.data["failures"].extend(failures)

    def write(self, path):
        with open(path, "w") as handle:
            json.dump(self.data, handle, indent=2, sort_keys=True)
        return path


def _prepare(config):
    fine_n, coarse_ns = config.validate()
    outdir = Path(config.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    cache_dir = outdir / "cache" if config.cache else None
    return fine_n, coarse_ns, outdir, cache_dir


def run(config):
    """Full study: basis build/load per (H, ell), all methods, CSV and manifest emission."""
    fine_n, coarse_ns, outdir, cache_dir = _prepare(config)
    velocity = config.velocity_field()
    f = resolve_f(config.f, config.dim)
    manifest = Manifest(config)

    def provider(coarse_n, ell):
        built, _, _ = load_or_build_basis(config, coarse_n, ell, cache_dir)
        return built

    result = analysis.convergence_study(
        config.dim, config.epsilon, velocity, f, fine_n, coarse_ns,
        config.methods, ells=[int(l) for l in config.ells], p=config.p,
        p_w=config.p_w, workers=config.workers, basis_provider=provider,
        allow_full_domain=config.allow_full_domain,
    )
    csv_path = outdir / f"convergence_{config.hash()}.csv"
    analysis.write_convergence_csv(result.rows, csv_path)
    manifest.add_file(csv_path)

    slopes_path = outdir / f"slopes_{config.hash()}.csv"
    with open(slopes_path, "w", newline="") as handle:
        writer = csv_module.writer(handle)
        writer.writerow(("method", "ell", "l2_slope"))
        for (method, ell), slope in sorted(result.slopes.items(), key=str):
            writer.writerow([method, "" if ell is None else ell,
                             "" if slope is None else f"{slope:.17g}"])
    manifest.add_file(slopes_path)

    manifest.add_failures(result.failures)
    manifest_path = outdir / f"manifest_{config.hash()}.json"
    manifest.write(manifest_path)
    return (2 if result.failures else 0), manifest


# ---------------------------------------------------------------------------
# subcommands


def cmd_basis(config, args):
    fine_n, coarse_ns, outdir, cache_dir = _prepare(config)
    manifest = Manifest(config)
    code = 0
    for coarse_n in coarse_ns:
        for ell in config.ells:
            try:
                built, path, cached = load_or_build_basis(
                    config, coarse_n, int(ell), cache_dir or outdir / "cache")
                if path is not None:
                    manifest.add_file(path)
                print(f"basis coarse_n={coarse_n} ell={ell} sigma={built.sigma():.6e} "
                      f"({'cache hit' if cached else 'built'})")
            except Exception as exc:  # noqa: BLE001
                manifest.add_failures([{"coarse_n": coarse_n, "ell": ell, "error": repr(exc)}])
                code = 2
    manifest.write(outdir / f"manifest_{config.hash()}.json")
    return code


def cmd_solve(config, args):
    fine_n, coarse_ns, outdir, cache_dir = _prepare(config)
    if len(coarse_ns) != 1 or len(config.methods) != 1:
        raise ConfigError("solve expects exactly one coarse size and one method")
    method = config.methods[0]
    coarse_n = coarse_ns[0]
    ell = int(config.ells[0])
    velocity = config.velocity_field()
    f = resolve_f(config.f, config.dim)
    coarse = build_grid(config.dim, coarse_n)
    fine = build_grid(config.dim, fine_n)
    nesting = build_nesting(coarse, fine)
    if method in analysis.SLOD_METHODS:
        built, _, _ = load_or_build_basis(config, coarse_n, ell, cache_dir)
        if method == "slod":
            sol = solvers.solve_slod(built, f, velocity=velocity, nesting=nesting)
        elif method == "slod_galerkin":
            sol = solvers.solve_slod(built, f, mode="unprojected", velocity=velocity,
                                     nesting=nesting)
        else:
            sol = solvers.solve_collocation(built, f)
    elif method == "fem":
        sol = solvers.solve_fem(coarse, config.epsilon, velocity, f, nesting)
    elif method == "supg":
        sol = solvers.solve_supg(coarse, config.epsilon, velocity, f, nesting=nesting)
    elif method == "ideal":
        sol = solvers.solve_ideal(coarse, fine, config.epsilon, velocity, f, nesting=nesting)
    else:
        sol = solvers.solve_reference(fine, config.epsilon, velocity, f)
    manifest = Manifest(config)
    path = outdir / f"solution_{method}_n{coarse_n}_ell{ell}_{config.hash()}.csv"
    analysis.write_vertex_csv(fine, sol.fine_representation, path)
    manifest.add_file(path)
    manifest.write(outdir / f"manifest_{config.hash()}.json")
    print(f"solution written to {path}")
    return 0


def cmd_study(config, args):
    code, _ = run(config)
    return code


def cmd_decay(config, args):
    fine_n, coarse_ns, outdir, cache_dir = _prepare(config)
    if len(coarse_ns) != 1:
        raise ConfigError("decay expects exactly one coarse size")
    velocity = config.velocity_field()
    f = resolve_f(config.f, config.dim)

    def provider(coarse_n, ell):
        built, _, _ = load_or_build_basis(config, coarse_n, ell, cache_dir)
        return built

    fit, points = analysis.localization_decay(
        config.dim, config.epsilon, velocity, f, fine_n, coarse_ns[0],
        [int(l) for l in config.ells], p=config.p, p_w=config.p_w,
        workers=config.workers, basis_provider=provider,
        allow_full_domain=config.allow_full_domain,
    )
    manifest = Manifest(config)
    fit_path = outdir / f"decay_fit_{config.hash()}.csv"
    pts_path = outdir / f"decay_points_{config.hash()}.csv"
    analysis.write_decay_csv(fit, fit_path)
    analysis.write_decay_points_csv(points, pts_path)
    manifest.add_file(fit_path)
    manifest.add_file(pts_path)
    manifest.write(outdir / f"manifest_{config.hash()}.json")
    print(f"decay fit: C1={fit.amplitude:.5g} C2={fit.rate:.5g} "
          f"exponent={fit.exponent_base:.3g}")
    return 0


def cmd_report(config, args):
    fine_n, coarse_ns, outdir, cache_dir = _prepare(config)
    if len(coarse_ns) != 1 or len(config.ells) != 1:
        raise ConfigError("report expects exactly one coarse size and one ell")
    built, _, _ = load_or_build_basis(config, coarse_ns[0], int(config.ells[0]), cache_dir)
    manifest = Manifest(config)

    sigma_path = outdir / f"sigma_{config.hash()}.csv"
    with open(sigma_path, "w", newline="") as handle:
        writer = csv_module.writer(handle)
        writer.writerow(("center_element", "sigma_t"))
        for entry in built.entries:
            writer.writerow([entry.center_element, f"{entry.sigma_t:.17g}"])
    manifest.add_file(sigma_path)

    riesz_path = outdir / f"riesz_{config.hash()}.csv"
    analysis.write_riesz_csv(analysis.riesz_report(built), riesz_path)
    manifest.add_file(riesz_path)

    eigen_path = outdir / f"eigen_decay_{config.hash()}.csv"
    analysis.write_eigen_csv(analysis.eigen_decay_report(built), eigen_path)
    manifest.add_file(eigen_path)

    manifest.write(outdir / f"manifest_{config.hash()}.json")
    print(f"sigma = {built.sigma():.6e}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    parser = argparse.ArgumentParser(
        prog="slodlab",
        description="Coarse-scale solver laboratory for convection-dominated diffusion",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("basis", "build and cache bases"),
        ("solve", "run one method at one configuration point"),
        ("study", "coarse-size sweep, emits convergence CSVs"),
        ("decay", "oversampling sweep, emits decay-fit CSVs"),
        ("report", "sigma, Riesz and eigenvalue-decay CSVs"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", type=str, help="JSON config file")
        cmd.add_argument("--preset", type=str, choices=sorted(PRESETS))
        cmd.add_argument("--full", action="store_true",
                         help="run presets at full scale instead of desk scale")
        cmd.add_argument("--scale-h", type=int, default=2,
                         help="desk-scale levels of fine-grid coarsening (default 2)")
        cmd.add_argument("--scale-eps", type=int, default=2,
                         help="desk-scale levels of epsilon enlargement (default 2)")
        cmd.add_argument("--dim", type=int)
        cmd.add_argument("--epsilon", type=float)
        cmd.add_argument("--fine-size", type=float)
        cmd.add_argument("--coarse-sizes", type=float, nargs="+")
        cmd.add_argument("--ells", type=int, nargs="+")
        cmd.add_argument("--p", type=float)
        cmd.add_argument("--p-w", type=float, dest="p_w")
        cmd.add_argument("--methods", type=str, nargs="+")
        cmd.add_argument("--f", type=str)
        cmd.add_argument("--output-dir", type=str)
        cmd.add_argument("--workers", type=int)
        cmd.add_argument("--no-cache", action="store_true")
        cmd.add_argument("--allow-full-domain", action="store_true")
    return parser


def config_from_args(args):
    if args.preset:
        config = preset_config(args.preset, full=args.full,
                               scale_h=args.scale_h, scale_eps=args.scale_eps)
    else:
        config = ExperimentConfig()
    if args.config:
        with open(args.config) as handle:
            data = json.load(handle)
        known = set(ExperimentConfig.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        for key, value in data.items():
            setattr(config, key, value)
    overrides = {
        "dim": args.dim, "epsilon": args.epsilon, "fine_size": args.fine_size,
        "coarse_sizes": args.coarse_sizes, "ells": args.ells, "p": args.p,
        "p_w": args.p_w, "methods": args.methods, "f": args.f,
        "output_dir": args.output_dir, "workers": args.workers,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(config, key, value)
    if args.no_cache:
        config.cache = False
    if args.allow_full_domain:
        config.allow_full_domain = True
    config.validate()
    return config


COMMANDS = {
    "basis": cmd_basis,
    "solve": cmd_solve,
    "study": cmd_study,
    "decay": cmd_decay,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = config_from_args(args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
