"""Command-line front end: presets, flags, manifests.

Exit codes: 0 success, 2 usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .driver import RunConfig, run_segmentation
from .errors import NumericalError, UsageError

# parameter tables behind each experiment preset
PRESETS = {
    "tanh1d-100": dict(
        source={"kind": "tanh1d", "steepness": 100.0},
        n=200, alpha=0.01, beta=1e-3, gamma=1e-3, k_eps=1e-9, T=20.0),
    "tanh1d-20": dict(
        source={"kind": "tanh1d", "steepness": 20.0},
        n=200, alpha=0.01, beta=1e-3, gamma=1e-3, k_eps=1e-9, T=20.0),
    "circle2d": dict(
        source={"kind": "circle2d"},
        n=50, alpha=1e-3, beta=1e-2, gamma=1e-5, k_eps=1e-10, T=7.0,
        scale="auto"),
}

# defaults used when segmenting a user-supplied image
IMAGE_DEFAULTS = dict(n=70, alpha=1e-3, beta=1e-2, gamma=1e-5, k_eps=1e-10,
                      T=0.6, eps="auto", scale="auto")


def _auto_or_float(text):
    if text == "auto":
        return "auto"
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected 'auto' or a number, got {text!r}") from None


def build_parser():
    parser = argparse.ArgumentParser(
        prog="atseg",
        description="Phase-field grey-scale image segmentation on an "
                    "adaptive moving mesh.")
    src = parser.add_mutually_exclusive_group()
    src.add_argument("--image", metavar="PATH",
                     help="8-bit grey-scale PGM (P2 or P5) to segment")
    src.add_argument("--preset", choices=sorted(PRESETS),
                     help="built-in experiment configuration")
    parser.add_argument("--from-manifest", metavar="FILE",
                        help="re-run the configuration stored in a manifest")
    parser.add_argument("--alpha", type=float, help="smoothing weight")
    parser.add_argument("--beta", type=float, help="edge-length weight")
    parser.add_argument("--gamma", type=float, help="fidelity weight")
    parser.add_argument("--keps", type=float, dest="k_eps",
                        help="degenerate-diffusion guard")
    parser.add_argument("--eps", type=_auto_or_float,
                        help="edge width, or 'auto' for gradient-based selection")
    parser.add_argument("--grad-cr", type=float, dest="grad_cr",
                        help="critical gradient targeted by the scaling")
    parser.add_argument("--scale", type=_auto_or_float,
                        help="input amplification L, or 'auto'")
    parser.add_argument("--n", type=int, help="mesh resolution per side")
    parser.add_argument("--T", type=float, help="final time")
    parser.add_argument("--macro-dt", type=float, dest="macro_dt",
                        help="mesh-update cadence")
    parser.add_argument("--tau", type=float, help="mesh-motion time scale")
    parser.add_argument("--seed", type=int, help="noise RNG seed")
    parser.add_argument("--noise", type=float,
                        help="uniform noise amplitude added to the input")
    parser.add_argument("--out-dir", dest="out_dir", help="output directory")
    parser.add_argument("--snapshot-every", type=int, dest="snapshot_every",
                        help="snapshot cadence in macro steps (0: ends only)")
    parser.add_argument("--freeze-mesh", action="store_true", default=None,
                        help="disable mesh motion (fixed uniform mesh)")
    parser.add_argument("--deterministic", action="store_true", default=None,
                        help="record deterministic mode in the manifest")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    return parser


def parse_args(argv):
    """Resolve flags (plus preset/manifest layers) into a RunConfig."""
    parser = build_parser()
    args = parser.parse_args(argv)

    layers = {}
    if args.from_manifest:
        manifest = json.loads(Path(args.from_manifest).read_text())
        layers.update(manifest["request"])
    if args.preset:
        layers.update(PRESETS[args.preset])
    if args.image:
        layers.update(IMAGE_DEFAULTS)
        layers["source"] = {"kind": "image", "path": args.image}

    overrides = {
        name: value for name, value in vars(args).items()
        if name not in ("image", "preset", "from_manifest") and value is not None
    }
    layers.update(overrides)

    if "source" not in layers:
        parser.error("one of --image, --preset, or --from-manifest is required")
    if "eps" not in layers:
        layers.setdefault("eps", "auto")
    known = {f.name for f in RunConfig.__dataclass_fields__.values()}
    unknown = set(layers) - known
    if unknown:
        parser.error(f"manifest carries unknown fields: {sorted(unknown)}")
    try:
        return RunConfig(**layers)
    except (TypeError, ValueError) as exc:
        parser.error(str(exc))


def config_as_dict(config):
    out = {}
    for name in RunConfig.__dataclass_fields__:
        value = getattr(config, name)
        out[name] = value
    return out


def write_run_manifest(config, result, results_dir):
    """Record the request and every effective parameter next to the outputs."""
    results_dir = Path(results_dir)
    results_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": __version__,
        "request": config_as_dict(config),
        "effective": {
            "eps": result.eps_value,
            "L": result.scale_value,
            "grad_max": None if result.grad is None else result.grad.grad_max,
            "grad_min": None if result.grad is None else result.grad.grad_min,
            "seed": config.seed,
            "n_vertices": result.mesh.n_vertices,
            "n_elements": result.mesh.n_elements,
            "elapsed_seconds": result.elapsed_seconds,
        },
    }
    path = results_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return str(path)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        config = parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if config.out_dir is None:
        config.out_dir = "atseg-out"
    try:
        result = run_segmentation(config)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    manifest_path = write_run_manifest(config, result, config.out_dir)
    print(f"eps = {result.eps_value:.6g}  L = {result.scale_value:.6g}  "
          f"phi in [{result.phi_min_overall:.4f}, {result.phi_max_overall:.4f}]")
    print(f"outputs: {config.out_dir} (manifest: {manifest_path})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
