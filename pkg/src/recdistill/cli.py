"""Command-line experiment runner.

Subcommands:
  rectify-demo  density grids before/after marginal rectification
  distill       run a configured SDS/VSD/USD/CTRL optimization
  classify      pose-classify a directory of glyph images
  metrics       entropy / Frechet / total-variation statistics from CSVs
  glyphs        generate a labelled glyph corpus as PGM files

Every subcommand is a pure function of (config, seed): outputs are
byte-identical across repeated runs.  RECDISTILL_THREADS caps the
classification thread pool.
"""

from __future__ import annotations

import argparse
import csv
import os
import pathlib
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import classifier as C
from . import distill as D
from . import rectify, worldmodel
from .config import parse_config
from .errors import ConfigurationError
from .metrics import categorical_entropy, gaussian_frechet, marginal_tv
from .oracle import grid_integrate
from .schedule import build_schedule


def _write_rows(path, header, rows):
    with open(path, "w", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# rectify-demo
# ---------------------------------------------------------------------------


def cmd_rectify_demo(args) -> int:
    spec = parse_config(args.config)
    m = spec.mixture
    if m.dim != 1:
        raise ConfigurationError("rectify-demo grids are 1D; use a 1D mixture")
    schedule = build_schedule(spec.num_steps, spec.beta_min, spec.beta_max)
    rect = spec.rectifier
    if rect is None:
        raise ConfigurationError("rectify-demo needs a [rectifier] section")
    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = np.linspace(spec.demo["grid_lo"], spec.demo["grid_hi"], spec.demo["grid_points"])
    x = grid[:, None]
    rows = [[_fmt(g), _fmt(p), _fmt(q)] for g, p, q in zip(
        grid, worldmodel.density(m, x), rectify.rectified_density(m, rect.target, x))]
    _write_rows(out / "density_clean.csv", ["x", "p", "p_rectified"], rows)
    for t in spec.demo["times"]:
        rows = [[_fmt(g), _fmt(p), _fmt(q)] for g, p, q in zip(
            grid,
            worldmodel.noisy_density(m, schedule, t, x),
            rectify.rectified_noisy_density(m, schedule, t, rect.target, x))]
        _write_rows(out / f"density_t{t}.csv", ["x", "p", "p_rectified"], rows)
    # category marginal of the rectified joint w(c) * p(c|x) * p(x)
    w = rectify.weight_function(rect.target, m.category_weights())
    box = [(spec.demo["grid_lo"], spec.demo["grid_hi"])]
    npts = spec.demo["grid_points"]
    mass = np.empty(m.num_categories)
    for c in range(m.num_categories):
        def cat_mass(pts, c=c):
            post = worldmodel.category_posterior(m, None, 0, pts)
            return worldmodel.density(m, pts) * w[c] * post[..., c]
        mass[c] = grid_integrate(cat_mass, box, npts)
    mass /= mass.sum()
    tv = marginal_tv(mass, rect.target.probs)
    _write_rows(out / "marginal_report.csv",
                ["category", "rectified_marginal", "target"],
                [[c, _fmt(mass[c]), _fmt(rect.target.probs[c])] for c in range(m.num_categories)])
    print(f"rectified marginal TV to target: {tv:.3e}")
    return 0


# ---------------------------------------------------------------------------
# distill
# ---------------------------------------------------------------------------


def cmd_distill(args) -> int:
    spec = parse_config(args.config)
    schedule = build_schedule(spec.num_steps, spec.beta_min, spec.beta_max)
    kwargs = dict(spec.distill)
    n = kwargs.pop("particles")
    dim = kwargs.pop("dim")
    init_scale = kwargs.pop("init_scale")
    renderer = kwargs.pop("renderer")
    cfg = D.DistillConfig(rectifier=spec.rectifier, **kwargs)
    ps = D.ParticleSet.initialise(n, dim, renderer, seed=args.seed, scale=init_scale)
    report = D.run(ps, spec.mixture, schedule, cfg)
    D.write_report(report, args.out_dir)
    it, split, entropy = report.metrics[-1]
    print(f"{cfg.method} finished: split {np.round(split, 4).tolist()}, entropy {entropy:.4f}")
    return 0


# ---------------------------------------------------------------------------
# classify / glyphs
# ---------------------------------------------------------------------------


def _thread_count() -> int:
    cap = os.environ.get("RECDISTILL_THREADS", "")
    return max(1, int(cap)) if cap else min(8, os.cpu_count() or 1)


def _classify_mode(args) -> str:
    if args.orient_only and args.texture_only:
        raise ConfigurationError("--orient-only and --texture-only are mutually exclusive")
    if args.orient_only:
        return "orientation-only"
    if args.texture_only:
        return "texture-only"
    return "full"


def _load_templates(template_dir) -> dict:
    images = {}
    for cat in C.CATEGORIES:
        path = pathlib.Path(template_dir) / f"{cat}.pgm"
        if not path.exists():
            raise ConfigurationError(f"missing template image for category {cat!r}: {path}")
        images[cat] = C.GlyphImage(pixels=C.read_pgm(path), true_category=cat)
    return images


def cmd_classify(args) -> int:
    pc = C.PoseClassifier.from_images(_load_templates(args.templates))
    mode = _classify_mode(args)
    paths = sorted(pathlib.Path(args.inputs).glob("*.pgm"))
    if not paths:
        raise ConfigurationError(f"no .pgm images under {args.inputs}")
    images = [C.GlyphImage(pixels=C.read_pgm(p)) for p in paths]
    with ThreadPoolExecutor(max_workers=_thread_count()) as pool:
        probs = list(pool.map(lambda im: C.classify(pc, im, mode=mode), images))
    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for path, p in zip(paths, probs):
        pred = pc.categories[int(np.argmax(p))]
        rows.append([path.name] + [_fmt(v) for v in p] + [pred])
    _write_rows(out / "probabilities.csv",
                ["image"] + [f"p_{c}" for c in pc.categories] + ["predicted"], rows)
    # labelled evaluation when filenames carry a category prefix like front_012.pgm
    labelled = [(p, pr) for p, pr in zip(paths, probs) if p.name.split("_")[0] in C.CATEGORIES]
    if labelled:
        k = len(pc.categories)
        conf = np.zeros((k, k), dtype=int)
        for path, p in labelled:
            conf[pc.categories.index(path.name.split("_")[0]), int(np.argmax(p))] += 1
        _write_rows(out / "confusion.csv",
                    ["true\\pred"] + list(pc.categories),
                    [[pc.categories[i]] + conf[i].tolist() for i in range(k)])
        support = conf.sum(axis=1)
        predicted = conf.sum(axis=0)
        diag = np.diag(conf)
        rows = []
        for i, cat in enumerate(pc.categories):
            precision = diag[i] / predicted[i] if predicted[i] else 0.0
            recall = diag[i] / support[i] if support[i] else 0.0
            f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
            rows.append([cat, _fmt(precision), _fmt(recall), _fmt(f1), int(support[i])])
        rows.append(["accuracy", _fmt(diag.sum() / conf.sum()), "", "", int(conf.sum())])
        _write_rows(out / "summary.csv", ["category", "precision", "recall", "f1", "support"], rows)
        print(f"accuracy {diag.sum() / conf.sum():.4f} over {conf.sum()} labelled images")
    return 0


def cmd_glyphs(args) -> int:
    out = pathlib.Path(args.out_dir)
    (out / "corpus").mkdir(parents=True, exist_ok=True)
    (out / "templates").mkdir(parents=True, exist_ok=True)
    for cat, img in C.template_images().items():
        C.write_pgm(out / "templates" / f"{cat}.pgm", img.pixels)
    corpus = C.generate_corpus(args.per_category, seed=args.seed)
    rows = []
    counters = {}
    for img in corpus:
        idx = counters.get(img.true_category, 0)
        counters[img.true_category] = idx + 1
        name = f"{img.true_category}_{idx:03d}.pgm"
        C.write_pgm(out / "corpus" / name, img.pixels)
        rows.append([name, img.true_category])
    _write_rows(out / "labels.csv", ["image", "category"], rows)
    print(f"wrote {len(corpus)} corpus glyphs and {len(C.CATEGORIES)} templates under {out}")
    return 0


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _read_matrix(path, skip_columns=0):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append([float(v) for v in row[skip_columns:]])
            except ValueError as exc:
                raise ConfigurationError(f"{path}: malformed row {lineno}: {exc}") from exc
    return header, np.array(rows)


def _read_probability_rows(path):
    """Probability rows from a CSV; columns headed p_* if present, else all."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cols = [i for i, name in enumerate(header) if name.startswith("p_")]
        if not cols:
            cols = list(range(len(header)))
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append([float(row[i]) for i in cols])
            except ValueError as exc:
                raise ConfigurationError(f"{path}: malformed row {lineno}: {exc}") from exc
    return [header[i] for i in cols], np.array(rows)


def cmd_metrics(args) -> int:
    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    if args.probs:
        header, mat = _read_probability_rows(args.probs)
        report = categorical_entropy(mat)
        rows.append(["entropy", _fmt(report.entropy)])
        for i, v in enumerate(report.mean_probs):
            rows.append([f"mean_prob_{i}", _fmt(v)])
    if args.particles_a and args.particles_b:
        _, a = _read_matrix(args.particles_a, skip_columns=2)
        _, b = _read_matrix(args.particles_b, skip_columns=2)
        rows.append(["frechet", _fmt(gaussian_frechet(a, b))])
    if args.marginal and args.target:
        p = np.array([float(v) for v in args.marginal.split(",")])
        q = np.array([float(v) for v in args.target.split(",")])
        rows.append(["marginal_tv", _fmt(marginal_tv(p, q))])
    if not rows:
        raise ConfigurationError("metrics: no inputs given (see --probs/--particles-a/--marginal)")
    _write_rows(out / "metrics.csv", ["metric", "value"], rows)
    for name, value in rows:
        print(f"{name} = {value}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recdistill", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rectify-demo", help="density grids before/after rectification")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_rectify_demo)

    p = sub.add_parser("distill", help="run a configured distillation")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("classify", help="pose-classify PGM images")
    p.add_argument("--templates", required=True)
    p.add_argument("--inputs", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--orient-only", action="store_true")
    p.add_argument("--texture-only", action="store_true")
    p.set_defaults(fn=cmd_classify)

    p = sub.add_parser("metrics", help="entropy / Frechet / TV from CSVs")
    p.add_argument("--probs")
    p.add_argument("--particles-a")
    p.add_argument("--particles-b")
    p.add_argument("--marginal")
    p.add_argument("--target")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("glyphs", help="generate a labelled glyph corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-category", type=int, default=100)
    p.set_defaults(fn=cmd_glyphs)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigurationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
