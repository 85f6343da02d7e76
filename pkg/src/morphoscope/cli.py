"""Command-line pipeline: phantom cohort -> templates -> aging field -> scores -> stats.

Every stage reads its inputs from, and writes its outputs to, a working
directory (``--workdir``, default ``.``) and leaves a ``manifest_<stage>.json``
next to its outputs recording the resolved configuration, its SHA-256 hash,
the SHA-256 of every input file and the library versions. Manifests carry no
timestamps, so identical reruns give identical manifests.

Configuration precedence: built-in defaults < ``--config`` JSON < flags.
"""

import argparse
import hashlib
import json
import logging
import platform
import sys
from collections import OrderedDict
from functools import partial
from pathlib import Path

import numpy as np

from . import __version__
from ._parallel import default_jobs, pmap
from .errors import MorphoscopeError, ValidationError
from .io import (fmt, read_cohort_csv, read_field, read_nifti, read_scores_csv,
                 write_cohort_csv, write_field, write_nifti, write_rows, write_scores_csv)
from .phantom import PhantomSpec, base_anatomy, generate_cohort, generate_subject
from .register import RegistrationConfig, register
from .scores import (QUANTILE_GRID, AgingField, default_regions, one_year_field,
                     score_subject)
from .stats import (ancova_adjust, compare_groups, describe_groups, fit_linear,
                    select_quantile, write_comparisons_csv, write_fits_csv,
                    write_groups_csv)
from .svf import Svf
from .template import build_template, efc, ventricle_edge_map, write_build_log
from .volume import Grid3, ScalarVolume, smooth

log = logging.getLogger("morphoscope")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3, 4
STAGE_ORDER = ("CN", "CDR0", "CDR0.5", "CDR1", "CDR2")
REGION_NAMES = ("ventricles", "hippocampi_amygdala", "whole_brain", "ventricle_edges")
SELECTION_COLUMNS = ("region", "q", "r2")

DEFAULT_CONFIG = {
    "registration": RegistrationConfig().to_dict(),
    "template": {"ages": [60, 90], "bandwidth": 2.5, "outer_iters": 3},
    "scoring": {"quantiles": list(QUANTILE_GRID), "regions": list(REGION_NAMES),
                "reference_age": 60},
    "stats": {"reference_group": "CN", "adjust": True, "welch": False, "min_n": 5},
}

EPILOG = """\
exit codes:
  0  success
  1  usage error (bad flags or arguments)
  2  i/o error (missing input, unreadable or malformed file)
  3  validation error (config or inputs violate a precondition)
  4  numerical error (degenerate statistics, non-finite values)

configuration precedence: defaults < --config JSON < command-line flags.
--jobs defaults to $MORPHOSCOPE_JOBS (1 if unset).
"""


# ------------------------------------------------------------------ config

def _merge(base, override, path="config"):
    out = dict(base)
    for key, val in override.items():
        if key not in base:
            raise ValidationError(f"{path}: unknown key {key!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ValidationError(f"{path}.{key} must be an object")
            out[key] = _merge(base[key], val, f"{path}.{key}")
        else:
            out[key] = val
    return out


def load_config(path=None, overrides=None):
    """Resolved configuration dict, validated."""
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ValidationError(f"{path}: top level must be an object")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    RegistrationConfig.from_dict(cfg["registration"])
    tpl = cfg["template"]
    if not tpl["ages"] or tpl["bandwidth"] <= 0 or int(tpl["outer_iters"]) < 0:
        raise ValidationError("template: need ages, bandwidth > 0, outer_iters >= 0")
    qs = cfg["scoring"]["quantiles"]
    if not qs or any(not np.isclose(q, round(q, 1)) or not 0 <= q <= 0.9 for q in qs):
        raise ValidationError("scoring.quantiles must be a subset of {0.0, 0.1, ..., 0.9}")
    bad = set(cfg["scoring"]["regions"]) - set(REGION_NAMES)
    if bad or not cfg["scoring"]["regions"]:
        raise ValidationError(f"scoring.regions: unknown region(s) {sorted(bad)}")
    if int(cfg["stats"]["min_n"]) < 2:
        raise ValidationError("stats.min_n must be at least 2")


def config_hash(cfg):
    """SHA-256 of the canonical JSON form (sorted keys, no whitespace)."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    import numba
    import scipy
    return {"morphoscope": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__}


def write_manifest(path, stage, cfg, inputs, outputs, extra=None, workdir=None):
    """Deterministic JSON manifest of one stage run."""
    def rel(p):
        p = Path(p)
        try:
            return str(p.resolve().relative_to(Path(workdir).resolve())) if workdir else str(p)
        except ValueError:
            return str(p)

    doc = OrderedDict(
        stage=stage,
        config_hash=config_hash(cfg),
        config=cfg,
        inputs={rel(p): _sha256(p) for p in sorted(set(map(str, inputs)))},
        outputs=sorted(rel(p) for p in outputs),
        versions=_versions(),
    )
    if extra:
        doc["details"] = extra
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ------------------------------------------------------------------ helpers

def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: {path}")
    return path


def _template_path(workdir, ref):
    """``ref`` as a file path, or a template name like ``T60`` inside the workdir."""
    p = Path(ref)
    if p.suffix == ".nii" or p.exists():
        return p
    return Path(workdir) / f"{ref}_img.nii"


def _age_name(age):
    return f"T{float(age):g}"


def _reg_cfg(cfg):
    return RegistrationConfig.from_dict(cfg["registration"])


def _cohort(workdir):
    path = _require(Path(workdir) / "cohort.csv", "cohort table")
    return path, read_cohort_csv(path)


def _register_subject(path, cfg, fixed):
    return register(fixed, read_nifti(path, kind="scalar"), cfg).svf.data


# ------------------------------------------------------------------ stages

def cmd_phantom_gen(args, cfg):
    out = Path(args.out or args.workdir)
    out.mkdir(parents=True, exist_ok=True)
    spec = PhantomSpec(grid=Grid3((args.size,) * 3), seed=args.seed)
    cohort = generate_cohort(spec, args.n_cn, args.n_ad)
    outputs = []
    for row, img, lab in zip(cohort.table, cohort.images, cohort.labels):
        for suffix, vol in (("img", img), ("lab", lab)):
            p = out / f"{row.scan_id}_{suffix}.nii"
            write_nifti(vol, p)
            outputs.append(p)
    write_cohort_csv(cohort.table, out / "cohort.csv")
    # reference segmentations of the phantom anatomy at the template ages
    _, lab60 = base_anatomy(spec)
    _, lab90, _ = generate_subject(spec, 90.0, 0.0, noise_sigma=0.0)
    write_nifti(lab60, out / "T60_lab.nii")
    write_nifti(lab90, out / "T90_lab.nii")
    outputs += [out / "cohort.csv", out / "T60_lab.nii", out / "T90_lab.nii"]
    write_manifest(out / "manifest_phantom-gen.json", "phantom-gen", cfg, [], outputs,
                   {"seed": args.seed, "size": args.size, "n_cn": args.n_cn,
                    "n_ad_per_stage": args.n_ad,
                    "prng": "numpy Philox, SeedSequence([seed, stream])"}, out)
    log.info("wrote %d subjects to %s", len(cohort.table), out)


def cmd_template_build(args, cfg):
    wd = Path(args.workdir)
    cohort_path, table = _cohort(wd)
    tcfg = cfg["template"]
    ages = [args.age] if args.age is not None else tcfg["ages"]
    rows = [r for r in table if r.group == "CN"] or list(table)
    paths = [_require(wd / r.path, "subject image") for r in rows]
    entries = [(r.scan_id, read_nifti(p, kind="scalar"), r.age) for r, p in zip(rows, paths)]
    for age in ages:
        name = _age_name(age)
        blog = []
        tpl = build_template(entries, age, tcfg["bandwidth"], _reg_cfg(cfg),
                             int(tcfg["outer_iters"]), args.jobs, blog)
        img_path = wd / f"{name}_img.nii"
        log_path = wd / f"{name}_build_log.csv"
        write_nifti(tpl, img_path)
        write_build_log(blog, log_path)
        write_manifest(wd / f"manifest_template-build_{name}.json", "template-build", cfg,
                       [cohort_path] + paths, [img_path, log_path],
                       {"age": float(age), "n_subjects": len(rows), "efc": efc(tpl)}, wd)
        log.info("template %s: efc %.6f", name, efc(tpl))


def cmd_register(args, cfg):
    fixed_p = _require(args.fixed, "fixed image")
    moving_p = _require(args.moving, "moving image")
    res = register(read_nifti(fixed_p, kind="scalar"), read_nifti(moving_p, kind="scalar"),
                   _reg_cfg(cfg))
    stem = Path(args.out)
    stem.parent.mkdir(parents=True, exist_ok=True)
    write_field(res.svf.field, stem)
    write_rows(str(stem) + "_energy.csv", ("step", "level", "energy"),
               ((str(i), str(lv), fmt(e))
                for i, (lv, e) in enumerate(zip(res.trace_levels, res.energy_trace))))
    write_manifest(str(stem) + "_manifest.json", "register", cfg, [fixed_p, moving_p],
                   [str(stem) + s for s in ("_x.nii", "_y.nii", "_z.nii", "_energy.csv")],
                   {"final_energy": res.final_energy, "min_jacobian": res.min_jacobian})


def cmd_aging_field(args, cfg):
    wd = Path(args.workdir)
    young = _require(_template_path(wd, args.young), "young template")
    old = _require(_template_path(wd, args.old), "old template")
    field = one_year_field(read_nifti(young, kind="scalar"), read_nifti(old, kind="scalar"),
                           args.young_age, args.old_age, _reg_cfg(cfg))
    stem = wd / args.out
    write_field(field.v0.field, stem)
    write_manifest(wd / "manifest_aging-field.json", "aging-field", cfg, [young, old],
                   [str(stem) + s for s in ("_x.nii", "_y.nii", "_z.nii")],
                   {"young_age": float(args.young_age), "old_age": float(args.old_age),
                    "gap_years": field.gap_years, "scale": 1.0 / field.gap_years}, wd)


def _regions(cfg, wd, ref_labels, ref_age):
    wanted = cfg["scoring"]["regions"]
    edges = None
    if "ventricle_edges" in wanted:
        old_ages = [a for a in cfg["template"]["ages"] if float(a) > float(ref_age)]
        if not old_ages:
            raise ValidationError("ventricle_edges needs an older template age")
        old_lab = _require(wd / f"{_age_name(max(old_ages))}_lab.nii",
                           "old template segmentation")
        edges = ventricle_edge_map(ref_labels, read_nifti(old_lab, kind="label"))
    return [r for r in default_regions(edges) if r.name in wanted]


def cmd_score(args, cfg):
    wd = Path(args.workdir)
    cohort_path, table = _cohort(wd)
    ref_age = cfg["scoring"]["reference_age"]
    ref_name = _age_name(ref_age)
    ref_img_p = _require(_template_path(wd, args.reference or ref_name), "reference template")
    ref_lab_p = _require(wd / f"{ref_name}_lab.nii", "reference segmentation")
    v0_stem = wd / args.v0
    for s in ("_x.nii", "_y.nii", "_z.nii"):
        _require(str(v0_stem) + s, "aging field")
    ref_img = read_nifti(ref_img_p, kind="scalar")
    ref_lab = read_nifti(ref_lab_p, kind="label")
    v0 = read_field(v0_stem, kind="velocity")
    aging = AgingField(Svf(v0), 1.0)
    regions = _regions(cfg, wd, ref_lab, ref_age)
    quantiles = [round(float(q), 1) for q in cfg["scoring"]["quantiles"]]

    paths = [_require(wd / r.path, "subject image") for r in table]
    fields = pmap(partial(_register_subject, cfg=_reg_cfg(cfg), fixed=ref_img),
                  paths, args.jobs)
    rows = []
    for r, data in zip(table, fields):
        rows.extend(score_subject(Svf.from_array(ref_img.grid, data), aging, ref_lab,
                                  regions, quantiles, r.scan_id))
    out = wd / args.out
    write_scores_csv(rows, out)
    inputs = [cohort_path, ref_img_p, ref_lab_p] + paths
    inputs += [Path(str(v0_stem) + s) for s in ("_x.nii", "_y.nii", "_z.nii")]
    write_manifest(wd / "manifest_score.json", "score", cfg, inputs, [out],
                   {"n_subjects": len(table)}, wd)


def _scores_by(rows):
    """``{(region, kind, q): {scan_id: value}}`` and the region order of first use."""
    table, order = {}, []
    for r in rows:
        if r.region_name not in order:
            order.append(r.region_name)
        table.setdefault((r.region_name, r.score_kind, round(r.quantile, 1)), {})[r.scan_id] = r.value
    return table, order


def cmd_stats_fit(args, cfg):
    wd = Path(args.workdir)
    cohort_path, table = _cohort(wd)
    scores_p = _require(wd / args.scores, "scores table")
    by, regions = _scores_by(read_scores_csv(scores_p))
    cn = [r for r in table if r.group == "CN"]
    fits, selection = [], []
    for region in regions:
        per_q = {}
        for q in sorted({k[2] for k in by if k[0] == region and k[1] == "AS"}):
            vals = by[(region, "AS", q)]
            subset = [r for r in cn if r.scan_id in vals]
            per_q[q] = ([r.age for r in subset], [vals[r.scan_id] for r in subset])
            fits.append((region, q, fit_linear(*per_q[q])))
        q_best, f_best = select_quantile(per_q)
        selection.append((region, fmt(q_best), fmt(f_best.r_squared)))
    fit_p, sel_p = wd / args.out, wd / "quantile_selection.csv"
    write_fits_csv(fits, fit_p)
    write_rows(sel_p, SELECTION_COLUMNS, selection)
    write_manifest(wd / "manifest_stats-fit.json", "stats-fit", cfg, [cohort_path, scores_p],
                   [fit_p, sel_p], None, wd)


def _selected_quantiles(wd, override):
    if override is not None:
        return lambda region: round(float(override), 1)
    sel_p = Path(wd) / "quantile_selection.csv"
    if not sel_p.exists():
        return lambda region: 0.0
    import csv
    with sel_p.open(newline="", encoding="utf-8") as fh:
        chosen = {rec["region"]: round(float(rec["q"]), 1) for rec in csv.DictReader(fh)}
    return lambda region: chosen.get(region, 0.0)


def cmd_stats_compare(args, cfg):
    wd = Path(args.workdir)
    cohort_path, table = _cohort(wd)
    scores_p = _require(wd / args.scores, "scores table")
    by, regions = _scores_by(read_scores_csv(scores_p))
    scfg = cfg["stats"]
    pick_q = _selected_quantiles(wd, args.quantile)
    comparisons, groups = [], []
    for region in regions:
        q = pick_q(region)
        for kind in ("AS", "ADS"):
            if (region, kind, q) not in by:
                raise ValidationError(f"no {kind} scores for {region} at q={q:g}")
            vals = by[(region, kind, q)]
            rows = [r for r in table if r.scan_id in vals]
            y = np.array([vals[r.scan_id] for r in rows])
            if scfg["adjust"]:
                y = ancova_adjust(y, [r.age for r in rows], [r.stage for r in rows],
                                  scfg["reference_group"])
            samples = {}
            for r, val in zip(rows, y):
                samples.setdefault(r.stage, []).append(float(val))
            order = [s for s in STAGE_ORDER if s in samples]
            order += sorted(set(samples) - set(order))
            ref = scfg["reference_group"]
            if ref in order:
                order.remove(ref)
                order.insert(0, ref)
            for c in compare_groups(samples, order, scfg["welch"], int(scfg["min_n"])):
                comparisons.append((region, kind, c))
            for g in describe_groups(samples, order, int(scfg["min_n"])):
                groups.append((region, kind, g))
    cmp_p, grp_p = wd / args.out, wd / "groups.csv"
    write_comparisons_csv(comparisons, cmp_p)
    write_groups_csv(groups, grp_p)
    inputs = [cohort_path, scores_p]
    if args.quantile is None and (wd / "quantile_selection.csv").exists():
        inputs.append(wd / "quantile_selection.csv")
    write_manifest(wd / "manifest_stats-compare.json", "stats-compare", cfg, inputs,
                   [cmp_p, grp_p], None, wd)


def cmd_efc(args, cfg):
    img_p = _require(args.image, "image")
    img = read_nifti(img_p, kind="scalar")
    mask = None
    if args.mask:
        mask = read_nifti(_require(args.mask, "mask"), kind="label")
    if args.blur:
        img = ScalarVolume(img.grid, smooth(img.data, args.blur))
    print(fmt(efc(img, mask)))


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="morphoscope", description=__doc__.splitlines()[0], epilog=EPILOG,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"morphoscope {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=".", help="stage input/output directory")
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--jobs", type=int, default=None,
                        help="worker processes (default $MORPHOSCOPE_JOBS or 1)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_, description=help_,
                            epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.set_defaults(func=func)
        return sp

    sp = add("phantom-gen", cmd_phantom_gen, "generate a seeded synthetic cohort")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="output directory (default: --workdir)")
    sp.add_argument("--size", type=int, default=64, help="cubic grid size")
    sp.add_argument("--n-cn", type=int, default=20)
    sp.add_argument("--n-ad", type=int, default=20, help="subjects per AD stage")

    sp = add("template-build", cmd_template_build, "build age-conditioned templates")
    sp.add_argument("--age", type=float, help="single template age (default: config ages)")
    sp.add_argument("--bandwidth", type=float)
    sp.add_argument("--outer-iters", type=int)

    sp = add("register", cmd_register, "register a moving image onto a fixed image")
    sp.add_argument("--fixed", required=True)
    sp.add_argument("--moving", required=True)
    sp.add_argument("--out", required=True, help="output stem for the _x/_y/_z velocity files")

    sp = add("aging-field", cmd_aging_field, "one-year normal-aging velocity field")
    sp.add_argument("--young", required=True, help="template name (T60) or image path")
    sp.add_argument("--old", required=True)
    sp.add_argument("--young-age", type=float, required=True)
    sp.add_argument("--old-age", type=float, required=True)
    sp.add_argument("--out", default="v0", help="output stem inside --workdir")

    sp = add("score", cmd_score, "regional AS and ADS for every cohort scan")
    sp.add_argument("--v0", default="v0", help="aging field stem inside --workdir")
    sp.add_argument("--reference", help="reference template (default T<reference_age>)")
    sp.add_argument("--reference-age", type=float)
    sp.add_argument("--out", default="scores.csv")

    sp = add("stats-fit", cmd_stats_fit, "AS-vs-age fits of CN scans and quantile selection")
    sp.add_argument("--scores", default="scores.csv")
    sp.add_argument("--out", default="fits.csv")

    sp = add("stats-compare", cmd_stats_compare, "pairwise group comparisons")
    sp.add_argument("--scores", default="scores.csv")
    sp.add_argument("--quantile", type=float,
                    help="quantile for every region (default: stats-fit selection, else 0)")
    sp.add_argument("--reference-group")
    sp.add_argument("--no-adjust", action="store_true", help="skip ANCOVA age adjustment")
    sp.add_argument("--welch", action="store_true", help="Welch instead of pooled t-test")
    sp.add_argument("--out", default="comparisons.csv")

    sp = add("efc", cmd_efc, "entropy focus criterion of an image")
    sp.add_argument("--image", required=True)
    sp.add_argument("--mask")
    sp.add_argument("--blur", type=float, default=0.0, help="Gaussian blur sigma first")
    return p


def _flag_overrides(args):
    over = {}
    tpl = {k: getattr(args, k) for k in ("bandwidth", "outer_iters")
           if getattr(args, k, None) is not None}
    if tpl:
        over["template"] = tpl
    if getattr(args, "reference_age", None) is not None:
        over["scoring"] = {"reference_age": args.reference_age}
    st = {}
    if getattr(args, "reference_group", None):
        st["reference_group"] = args.reference_group
    if getattr(args, "no_adjust", False):
        st["adjust"] = False
    if getattr(args, "welch", False):
        st["welch"] = True
    if st:
        over["stats"] = st
    return over


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs is None:
            args.jobs = default_jobs()
        cfg = load_config(args.config, _flag_overrides(args))
        args.func(args, cfg)
    except MorphoscopeError as exc:
        print(f"morphoscope: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"morphoscope: io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as exc:
        print(f"morphoscope: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ArithmeticError as exc:
        print(f"morphoscope: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
