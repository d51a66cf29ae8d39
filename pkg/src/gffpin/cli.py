"""Reproducible experiment runner.

Config files are flat `key = value` text; every command requires an explicit
seed. Artifacts are CSV written atomically (temp file + rename) and listed
with checksums in a manifest that is created before and finalized after the
run. Exit codes: 0 ok, 2 config validation, 3 numerical failure, 4 resource
exceeded. `--jobs N` parallelizes independent grid points and replicas and
never changes output bytes.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import math
import os
import sys
import time

import numpy as np

from . import __version__, pinning, renewal1d, scaling
from .errors import NumericalError, ResourceError, ToolkitError, ValidationError
from .green import box_region, green_killed
from .stats import batch_stderr
from .walk import kernel_from_file, crossing_cells, range_tail, simulate_range

COMMANDS = (
    "kernel-info", "green-probe", "pins-sample", "fkg-check",
    "domination-check", "variance-scan", "mass-scan", "range-stats",
    "renewal1d", "box-stability",
)

OUTPUT_DIR_ENV = "GFFPIN_OUT"


# ---------------------------------------------------------------------------
# config parsing


def parse_config_text(text) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in out:
            raise ValidationError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _parse_int(s):
    return int(s)


def _parse_float(s):
    return float(s)


def _parse_bool(s):
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_floats(s):
    parts = s.replace(",", " ").split()
    if not parts:
        raise ValueError("empty list")
    return [float(p) for p in parts]


def _parse_ints(s):
    return [int(p) for p in s.replace(",", " ").split()]


def _parse_sites(s):
    """Semicolon-separated coordinate groups: '0 0; 1 0' -> [(0,0), (1,0)]."""
    sites = []
    for group in s.split(";"):
        group = group.strip()
        if group:
            sites.append(tuple(int(t) for t in group.replace(",", " ").split()))
    if not sites:
        raise ValueError("empty site list")
    return sites


def _parse_str(s):
    return s


_PARSERS = {
    "int": _parse_int, "float": _parse_float, "bool": _parse_bool,
    "floats": _parse_floats, "ints": _parse_ints, "sites": _parse_sites,
    "str": _parse_str,
}

# key -> (type, required)
SCHEMAS = {
    "kernel-info": {"kernel_file": ("str", True)},
    "green-probe": {
        "kernel_file": ("str", True), "box_radius": ("int", True),
        "probes": ("sites", True), "pins": ("sites", False),
    },
    "pins-sample": {
        "kernel_file": ("str", True), "box_radius": ("int", True),
        "epsilon": ("float", True), "sweeps": ("int", True),
        "burnin": ("int", False), "window_radius": ("int", False),
    },
    "fkg-check": {
        "kernel_file": ("str", True), "box_radius": ("int", True),
        "eps_list": ("floats", True),
    },
    "domination-check": {
        "kernel_file": ("str", True), "box_radius": ("int", True),
        "epsilon": ("float", True), "targets": ("sites", True),
        "samples": ("int", True), "replicas": ("int", False),
    },
    "variance-scan": {
        "kernel_file": ("str", True), "eps_list": ("floats", True),
        "budget": ("int", True), "replicas": ("int", False),
        "policy_c": ("float", False), "min_radius": ("int", False),
        "box_radius": ("int", False), "eta": ("float", False),
    },
    "mass-scan": {
        "kernel_file": ("str", True), "eps_list": ("floats", True),
        "budget": ("int", True), "mode": ("str", False),
        "mapping": ("str", False), "region_radius": ("int", False),
        "samples": ("int", False),
    },
    "range-stats": {
        "kernel_file": ("str", True), "n": ("int", True),
        "reps": ("int", True), "kappa": ("float", False),
        "crossing_k": ("int", False), "crossing_n": ("int", False),
        "crossing_reps": ("int", False),
    },
    "renewal1d": {"eps_list": ("floats", True), "tol": ("float", False)},
    "box-stability": {
        "kernel_file": ("str", True), "epsilon": ("float", True),
        "radii": ("ints", True), "probe": ("str", True),
        "samples": ("int", True), "replicas": ("int", False),
    },
}


def validate(command, raw_config) -> list[str]:
    """Return the list of violations; empty iff a run would start."""
    if command not in SCHEMAS:
        return [f"unknown command {command!r}"]
    schema = dict(SCHEMAS[command])
    schema["seed"] = ("int", True)
    violations = []
    for key in raw_config:
        if key not in schema:
            violations.append(f"unknown key {key!r} for {command}")
    parsed = {}
    for key, (typ, required) in schema.items():
        if key not in raw_config:
            if required:
                violations.append(f"missing required key {key!r}")
            continue
        try:
            parsed[key] = _PARSERS[typ](raw_config[key])
        except (ValueError, ValidationError) as exc:
            violations.append(f"bad value for {key!r}: {exc}")
    if violations:
        return violations

    def positive(key, what="positive"):
        if key in parsed and parsed[key] <= 0:
            violations.append(f"{key} must be {what}")

    positive("epsilon")
    positive("sweeps")
    positive("samples")
    positive("budget")
    positive("reps")
    positive("n")
    positive("kappa")
    if "eps_list" in parsed:
        eps = parsed["eps_list"]
        if any(e <= 0 for e in eps):
            violations.append("epsilon must be positive")
        if command in ("variance-scan", "mass-scan"):
            if len(eps) < 3:
                violations.append("eps_list needs at least 3 points")
            elif any(b >= a for a, b in zip(eps, eps[1:])):
                violations.append("eps_list must be strictly decreasing")
    if "kernel_file" in parsed and not os.path.isfile(parsed["kernel_file"]):
        violations.append(f"kernel file {parsed['kernel_file']!r} not found")
    if command == "variance-scan" and "box_radius" in parsed and not violations:
        c = parsed.get("policy_c", 1.5)
        floor = max(scaling.variance_box_policy(e, c, parsed.get("min_radius", 8))
                    for e in parsed["eps_list"])
        if parsed["box_radius"] < floor:
            violations.append(
                f"box_radius {parsed['box_radius']} below the policy floor "
                f"{floor} (radius >= {c} * eps^-1/2 |log eps|)")
    if command == "box-stability":
        if parsed.get("probe") not in ("unpinned-marginal", "variance"):
            violations.append("probe must be unpinned-marginal or variance")
        radii = parsed.get("radii", [])
        if sorted(set(radii)) != list(radii):
            violations.append("radii must be strictly increasing")
    if command == "mass-scan":
        if parsed.get("mode", "bernoulli-surrogate") not in (
                "bernoulli-surrogate", "pinning-exact"):
            violations.append("mode must be bernoulli-surrogate or pinning-exact")
        if parsed.get("mapping", "default") not in ("default", "direct"):
            violations.append("mapping must be default or direct")
    return violations


def parse_command_config(command, raw_config) -> dict:
    schema = dict(SCHEMAS[command])
    schema["seed"] = ("int", True)
    return {k: _PARSERS[schema[k][0]](v) for k, v in raw_config.items()}


# ---------------------------------------------------------------------------
# artifacts


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header, rows):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    os.replace(tmp, path)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return h.hexdigest()


class Manifest:
    def __init__(self, out_dir, command, raw_config, jobs):
        self.path = os.path.join(out_dir, "manifest.txt")
        self.out_dir = out_dir
        self.entries = [("status", "running"), ("command", command),
                        ("toolkit_version", __version__), ("jobs", str(jobs)),
                        ("seed_scheme",
                         "counter-derived: SeedSequence([seed, index...])")]
        for key in sorted(raw_config):
            self.entries.append((f"config.{key}", raw_config[key]))
        self.files = []
        self.t0 = time.monotonic()
        self._write()

    def _write(self, extra=()):
        tmp = f"{self.path}.tmp.{os.getpid()}"
        with open(tmp, "w") as fh:
            for key, value in self.entries + list(extra):
                fh.write(f"{key} = {value}\n")
        os.replace(tmp, self.path)

    def add_file(self, name):
        self.files.append(name)

    def finalize(self):
        self.entries[0] = ("status", "done")
        extra = [("wall_seconds", f"{time.monotonic() - self.t0:.3f}")]
        for name in self.files:
            path = os.path.join(self.out_dir, name)
            extra.append((f"file.{name}.bytes", str(os.path.getsize(path))))
            extra.append((f"file.{name}.sha256", _sha256(path)))
        self._write(extra)


# ---------------------------------------------------------------------------
# command implementations


def _load_kernel(cfg):
    return kernel_from_file(cfg["kernel_file"])


def _cmd_kernel_info(cfg, out, manifest, jobs):
    k = _load_kernel(cfg)
    rows = [("dim", k.d), ("lazy", k.lazy), ("beta_eff", k.beta_eff),
            ("p0", k.p0), ("aperiodic", k.aperiodic), ("max_step", k.max_step),
            ("sqrt_det_cov", k.sqrt_det_cov)]
    for i in range(k.d):
        for j in range(i, k.d):
            rows.append((f"cov_{i}{j}", k.cov[i, j]))
    write_csv(os.path.join(out, "kernel_summary.csv"), ("key", "value"), rows)
    manifest.add_file("kernel_summary.csv")
    sup = [(*vec, p) for vec, p in k.support()]
    write_csv(os.path.join(out, "kernel_support.csv"),
              tuple(f"x{i+1}" for i in range(k.d)) + ("probability",), sup)
    manifest.add_file("kernel_support.csv")


def _cmd_green_probe(cfg, out, manifest, jobs):
    k = _load_kernel(cfg)
    region = box_region(k, cfg["box_radius"], pins=cfg.get("pins", ()))
    rows = []
    for probe in cfg["probes"]:
        if len(probe) != 2 * k.d:
            raise ValidationError(
                f"probe {probe} must hold {2 * k.d} coordinates (x then y)")
        x, y = probe[:k.d], probe[k.d:]
        g = green_killed(region, x, y)
        rows.append((*x, *y, g.value, g.residual))
    header = tuple(f"x{i+1}" for i in range(k.d)) \
        + tuple(f"y{i+1}" for i in range(k.d)) + ("G", "residual")
    write_csv(os.path.join(out, "green_probes.csv"), header, rows)
    manifest.add_file("green_probes.csv")


def _cmd_pins_sample(cfg, out, manifest, jobs):
    k = _load_kernel(cfg)
    region = box_region(k, cfg["box_radius"])
    state = pinning.sample_pins(
        region, cfg["epsilon"], cfg["sweeps"], cfg["seed"],
        burnin=cfg.get("burnin"), record=True,
        window_radius=cfg.get("window_radius"))
    header = ("sweep",) + tuple(
        "s_" + "_".join(str(c) for c in site) for site in region.sites)
    rows = [(state.burnin + 1 + i, *row) for i, row in enumerate(state.samples)]
    write_csv(os.path.join(out, "pin_samples.csv"), header, rows)
    manifest.add_file("pin_samples.csv")


def _cmd_fkg_check(cfg, out, manifest, jobs):
    k = _load_kernel(cfg)
    region = box_region(k, cfg["box_radius"])
    rows = []
    for eps in cfg["eps_list"]:
        res = pinning.check_lattice_condition(region, eps)
        rows.append((eps, res.min_ratio, res.argmin_pair[0],
                     res.argmin_pair[1], res.pairs_checked))
    write_csv(os.path.join(out, "fkg_check.csv"),
              ("epsilon", "min_ratio", "argmin_a", "argmin_b", "pairs"), rows)
    manifest.add_file("fkg_check.csv")


def _cmd_domination_check(cfg, out, manifest, jobs):
    k = _load_kernel(cfg)
    region = box_region(k, cfg["box_radius"])
    res = pinning.empty_probability(
        region, cfg["epsilon"], cfg["targets"], cfg["samples"], cfg["seed"],
        replicas=cfg.get("replicas", 4))
    rows = [(cfg["epsilon"], res.estimate.mean, res.estimate.stderr,
             res.estimate.n, res.lower_curve, res.upper_curve,
             res.density_lo, res.density_hi, len(cfg["targets"]))]
    write_csv(os.path.join(out, "domination_check.csv"),
              ("epsilon", "estimate", "stderr", "n_used", "lower_curve",
               "upper_curve", "density_lo", "density_hi", "target_size"), rows)
    manifest.add_file("domination_check.csv")


def _cmd_variance_scan(cfg, out, manifest, jobs):
    k = _load_kernel(cfg)
    res = scaling.variance_scan(
        k, cfg["eps_list"], budget=cfg["budget"], seed=cfg["seed"],
        replicas=cfg.get("replicas", 4), policy_c=cfg.get("policy_c", 1.5),
        min_radius=cfg.get("min_radius", 8), box_radius=cfg.get("box_radius"),
        eta=cfg.get("eta", 3.0), jobs=jobs)
    d = res.diagnostics
    rows = [(e, v.mean, v.stderr, v.n, f, br, n0, g, off)
            for e, v, f, br, n0, g, off in zip(
                res.eps, res.values, res.flags, d["box_radius"], d["n0"],
                d["gn0"], d["offsets"])]
    write_csv(os.path.join(out, "variance_scan_points.csv"),
              ("epsilon", "value", "stderr", "n_used", "flags", "box_radius",
               "n0", "gn0", "offset"), rows)
    manifest.add_file("variance_scan_points.csv")
    fit = [("slope", res.slope), ("slope_stderr", res.slope_stderr),
           ("slope_reference", d["slope_reference"]), ("chi2", d["chi2"]),
           ("dof", d["dof"]), ("policy", d["policy"])]
    write_csv(os.path.join(out, "variance_scan_fit.csv"), ("key", "value"), fit)
    manifest.add_file("variance_scan_fit.csv")


def _cmd_mass_scan(cfg, out, manifest, jobs):
    k = _load_kernel(cfg)
    res = scaling.mass_scan(
        k, cfg["eps_list"], mode=cfg.get("mode", "bernoulli-surrogate"),
        budget=cfg["budget"], seed=cfg["seed"],
        mapping=cfg.get("mapping", "default"),
        region_radius=cfg.get("region_radius"), samples=cfg.get("samples"),
        jobs=jobs)
    d = res.diagnostics
    rows = []
    for i, (e, v, f) in enumerate(zip(res.eps, res.values, res.flags)):
        dens = d["density"][i] if i < len(d["density"]) else ""
        nmax = d["n_max"][i] if i < len(d["n_max"]) else ""
        rows.append((e, v.mean, v.stderr, v.n, f, dens, nmax))
    write_csv(os.path.join(out, "mass_scan_points.csv"),
              ("epsilon", "value", "stderr", "n_used", "flags", "density",
               "n_max"), rows)
    manifest.add_file("mass_scan_points.csv")
    fit = [("exponent", res.slope), ("exponent_stderr", res.slope_stderr),
           ("mode", d["mode"]), ("mapping", d["mapping"]),
           ("chi2", d.get("chi2", "")), ("dof", d.get("dof", ""))]
    if "m_over_sqrt_eps" in d:
        fit.append(("m_over_sqrt_eps",
                    " ".join(repr(v) for v in d["m_over_sqrt_eps"])))
        fit.append(("log_correction_monotone", d["log_correction_monotone"]))
    write_csv(os.path.join(out, "mass_scan_fit.csv"), ("key", "value"), fit)
    manifest.add_file("mass_scan_fit.csv")


def _cmd_range_stats(cfg, out, manifest, jobs):
    k = _load_kernel(cfg)
    rows = []
    _, est = simulate_range(k, cfg["n"], cfg["reps"], cfg["seed"])
    rows.append(("mean_range", cfg["n"], est.mean, est.stderr, est.n, ""))
    if "kappa" in cfg:
        tail = range_tail(k, cfg["n"], cfg["kappa"], cfg["reps"], cfg["seed"])
        rows.append(("tail_prob", tail.threshold, tail.estimate.mean,
                     tail.estimate.stderr, tail.estimate.n,
                     f"upper95={tail.upper95!r}"))
    if "crossing_k" in cfg:
        cn = cfg.get("crossing_n", 10)
        creps = cfg.get("crossing_reps", 200)
        eta = crossing_cells(k, cn, cfg["crossing_k"], creps, cfg["seed"])
        rows.append(("crossing_cells_mean", cn, float(eta.mean()),
                     float(eta.std(ddof=1) / math.sqrt(creps)), creps,
                     f"K={cfg['crossing_k']}"))
    write_csv(os.path.join(out, "range_stats.csv"),
              ("statistic", "param", "value", "stderr", "n_used", "extra"),
              rows)
    manifest.add_file("range_stats.csv")


def _cmd_renewal1d(cfg, out, manifest, jobs):
    rows = []
    for eps in cfg["eps_list"]:
        model = renewal1d.renewal_model(eps, tol=cfg.get("tol", 1e-12))
        big_m = renewal1d.renewal_mean(model)
        var = renewal1d.variance_1d(model)
        rows.append((eps, model.lam, model.lam / (eps * eps / 2.0), big_m,
                     big_m * eps**3, var, var * 2.0 * eps * eps))
    write_csv(os.path.join(out, "renewal1d.csv"),
              ("epsilon", "lambda", "lambda_over_eps2_half", "M",
               "M_times_eps3", "variance", "variance_times_2eps2"), rows)
    manifest.add_file("renewal1d.csv")


def _cmd_box_stability(cfg, out, manifest, jobs):
    k = _load_kernel(cfg)
    rows = [(r.radius, cfg["probe"], r.value.mean, r.value.stderr, r.value.n)
            for r in pinning.box_stability(
                k, cfg["epsilon"], cfg["radii"], cfg["probe"], cfg["samples"],
                cfg["seed"], replicas=cfg.get("replicas", 4), jobs=jobs)]
    write_csv(os.path.join(out, "box_stability.csv"),
              ("radius", "probe", "estimate", "stderr", "n_used"), rows)
    manifest.add_file("box_stability.csv")


_HANDLERS = {
    "kernel-info": _cmd_kernel_info,
    "green-probe": _cmd_green_probe,
    "pins-sample": _cmd_pins_sample,
    "fkg-check": _cmd_fkg_check,
    "domination-check": _cmd_domination_check,
    "variance-scan": _cmd_variance_scan,
    "mass-scan": _cmd_mass_scan,
    "range-stats": _cmd_range_stats,
    "renewal1d": _cmd_renewal1d,
    "box-stability": _cmd_box_stability,
}


def run(command, raw_config, out_dir, jobs=1) -> int:
    """Validate, dispatch, and write artifacts; returns the exit status."""
    violations = validate(command, raw_config)
    if violations:
        for v in violations:
            print(f"config error: {v}", file=sys.stderr)
        return 2
    cfg = parse_command_config(command, raw_config)
    os.makedirs(out_dir, exist_ok=True)
    manifest = Manifest(out_dir, command, raw_config, jobs)
    try:
        _HANDLERS[command](cfg, out_dir, manifest, jobs)
    except ResourceError as exc:
        print(f"resource exceeded: {exc}", file=sys.stderr)
        return 4
    except (NumericalError, ValidationError) as exc:
        # post-validation ValidationError means a numerically unusable setup
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    manifest.finalize()
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gffpin",
        description="Pinned lattice free field experiments")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("config", help="flat key = value config file")
    parser.add_argument("--jobs", type=int, default=1,
                        help="worker threads; never changes output bytes")
    parser.add_argument("--output-dir", default=None)
    args = parser.parse_args(argv)
    if args.jobs < 1:
        print("config error: jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        with open(args.config) as fh:
            raw = parse_config_text(fh.read())
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValidationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out_dir = args.output_dir or os.environ.get(OUTPUT_DIR_ENV) or "."
    try:
        return run(args.command, raw, out_dir, jobs=args.jobs)
    except ToolkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
