"""Command-line front end: ``preimage --model net.json --domain box.json ...``."""
import argparse
import json
import logging
import os
import sys

import numpy as np

from .engine import RunConfig, premap2, trace_writer
from .heuristics import HeuristicConfig
from .model import (OutputSpec, append_output_spec, class_dominance_spec,
                    load_model_file)
from .sampler import WeightFunction, sample_uniform

EXIT_OK, EXIT_ERROR, EXIT_BUDGET = 0, 1, 2

log = logging.getLogger("preimage")


def read_image(path):
    """Read a plain PPM/PGM (P3/P2) or a JSON tensor as floats in [0, 1].

    Returns an array of shape (H, W, C).
    """
    with open(path) as fh:
        text = fh.read()
    if text.lstrip().startswith(("P3", "P2")):
        tokens = []
        for line in text.splitlines():
            tokens += line.split("#", 1)[0].split()
        magic, w, h, maxval = tokens[0], *map(int, tokens[1:4])
        ch = 3 if magic == "P3" else 1
        vals = np.array(tokens[4:4 + w * h * ch], dtype=np.float64)
        if vals.size != w * h * ch:
            raise ValueError(f"{path}: truncated image data")
        return vals.reshape(h, w, ch) / maxval
    img = np.asarray(json.loads(text), dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3:
        raise ValueError(f"{path}: image tensor must be H x W or H x W x C")
    if img.min() < 0 or img.max() > 1:
        raise ValueError(f"{path}: image values must lie in [0, 1]")
    return img


def build_patch_domain(image, patch, kind="free", lower=0.0, upper=1.0):
    """Input box around an image.

    ``patch`` is either a rectangle ``(x, y, w, h)`` or a boolean (H, W) mask.
    A free patch lets the patched pixels range over ``[lower, upper]`` in
    every channel; a one-sided patch keeps the image as the lower bound and
    raises the patched pixels' upper bound to 1.  Returns flat ``(lo, hi)``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    H, W, _ = image.shape
    if isinstance(patch, (tuple, list)) and len(patch) == 4 and \
            np.ndim(patch[0]) == 0:
        x, y, w, h = (int(v) for v in patch)
        if x < 0 or y < 0 or w < 0 or h < 0 or x + w > W or y + h > H:
            raise ValueError(f"patch {(x, y, w, h)} lies outside the "
                             f"{W}x{H} image")
        mask = np.zeros((H, W), dtype=bool)
        mask[y:y + h, x:x + w] = True
    else:
        mask = np.asarray(patch, dtype=bool)
        if mask.shape != (H, W):
            raise ValueError(f"mask shape {mask.shape} does not match the "
                             f"{H}x{W} image")
    lo, hi = image.copy(), image.copy()
    if kind == "free":
        lo[mask] = lower
        hi[mask] = upper
    elif kind == "one-sided":
        hi[mask] = 1.0
    else:
        raise ValueError(f"unknown patch kind {kind!r}")
    return lo.reshape(-1), hi.reshape(-1), mask


def load_domain(path):
    """Parse a domain file; returns ``(lo, hi, info)``.

    Forms: ``{"lower": [...], "upper": [...]}``;
    ``{"type": "patch", "image": FILE, "x", "y", "w", "h"}`` with optional
    ``"lower"``/``"upper"`` channel bounds; and
    ``{"type": "masked", "image": FILE, "mask": [[0, 1, ...], ...]}``.
    Image paths are relative to the domain file.
    """
    with open(path) as fh:
        spec = json.load(fh)
    kind = spec.get("type", "box")
    if kind == "box":
        lo = np.asarray(spec["lower"], dtype=np.float64).reshape(-1)
        hi = np.asarray(spec["upper"], dtype=np.float64).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError("domain lower and upper differ in length")
        if np.any(lo > hi):
            raise ValueError("domain has lower > upper")
        return lo, hi, {}
    img_path = os.path.join(os.path.dirname(os.path.abspath(path)),
                            spec["image"])
    image = read_image(img_path)
    if kind == "patch":
        rect = (spec["x"], spec["y"], spec["w"], spec["h"])
        lo, hi, mask = build_patch_domain(image, rect, "free",
                                          spec.get("lower", 0.0),
                                          spec.get("upper", 1.0))
    elif kind == "masked":
        lo, hi, mask = build_patch_domain(image, spec["mask"], "one-sided")
    else:
        raise ValueError(f"unknown domain type {kind!r}")
    return lo, hi, {"image": image, "mask": mask}


def make_weight_fn(text, input_shape, domain_info):
    """Parse ``NAME:{json}``; brightness defaults to the domain's image and mask."""
    name, _, blob = text.partition(":")
    params = json.loads(blob) if blob.strip() else {}
    if name == "brightness":
        if isinstance(params.get("image"), str):
            params["image"] = read_image(params["image"]).tolist()
        if "image" not in params and "image" in domain_info:
            params["image"] = domain_info["image"].tolist()
        if "mask" not in params and "mask" in domain_info:
            params["mask"] = domain_info["mask"].astype(int).tolist()
    return WeightFunction(name, params, input_shape)


def verify_result(doc, net, n=10_000, seed=0):
    """Re-check a result document's soundness by sampling.

    Uses only the document (domain, specification, split histories and
    planes) and the network.  Returns counts of points inside the
    under-approximation that violate the specification, and of preimage
    points missing from the over-approximation.
    """
    lo = np.asarray(doc["domain"]["lower"], dtype=np.float64)
    hi = np.asarray(doc["domain"]["upper"], dtype=np.float64)
    spec = OutputSpec.from_json(doc["spec"])
    net_o = append_output_spec(net, spec)
    X = sample_uniform(lo, hi, n, np.random.default_rng(seed))
    out, pre = net_o.run(X)
    good = np.all(out >= 0, axis=1)
    side = doc["config"]["mode"]
    in_approx = np.zeros(n, dtype=bool)
    owner = np.zeros(n, dtype=int)
    for leaf in doc["leaves"]:
        here = np.ones(n, dtype=bool)
        for layer, neuron, sign in leaf["splits"]:
            z = pre[layer][:, neuron]
            here &= (z < 0) if sign == "-" else (z >= 0)
        owner += here
        A = np.asarray(leaf["plane"]["A"], dtype=np.float64)
        b = np.asarray(leaf["plane"]["b"], dtype=np.float64)
        in_approx |= here & np.all(X @ A.T + b >= 0, axis=1)
    return {
        "points": n,
        "unassigned": int(np.sum(owner == 0)),
        "under_violations": int(np.sum(in_approx & ~good)) if side == "under" else 0,
        "over_violations": int(np.sum(good & ~in_approx)) if side == "over" else 0,
    }


def build_parser():
    p = argparse.ArgumentParser(
        prog="preimage",
        description="Under- or over-approximate the preimage of an output "
                    "polytope under a ReLU network.")
    p.add_argument("--model", required=True, help="model JSON file")
    p.add_argument("--domain", required=True, help="domain JSON file")
    spec = p.add_mutually_exclusive_group(required=True)
    spec.add_argument("--spec", help="output specification JSON {C, d}")
    spec.add_argument("--label", type=int,
                      help="class-dominance specification for this label")
    p.add_argument("--mode", choices=("under", "over"), default="under")
    p.add_argument("--threshold", type=float,
                   help="target ratio (default 0.9 under, 1.1 over)")
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--time-limit", type=float, default=600.0)
    p.add_argument("--iterations", type=int, help="maximum refinement rounds")
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--heuristics", help="JSON file mapping heuristic to weight")
    p.add_argument("--weight-fn", metavar="NAME:PARAMS",
                   help="input prior, e.g. 'brightness' or 'piecewise:{...}'")
    p.add_argument("--bootstrap", type=int, default=1000,
                   help="bootstrap replicates (0 disables intervals)")
    p.add_argument("--level", type=float, default=0.9)
    p.add_argument("--output", help="result document path (default stdout)")
    p.add_argument("--trace", help="progress trace path (JSON lines)")
    p.add_argument("--no-shortcuts", action="store_true")
    p.add_argument("--no-tighten", action="store_true")
    p.add_argument("--no-beta", action="store_true")
    p.add_argument("--reverse-depth", choices=("prev", "all", "input"),
                   default="prev")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--verify", type=int, default=0, metavar="N",
                   help="re-check the result on N random points")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(args):
    net = load_model_file(args.model)
    lo, hi, info = load_domain(args.domain)
    if args.spec:
        with open(args.spec) as fh:
            spec = OutputSpec.from_json(json.load(fh))
    else:
        spec = class_dominance_spec(args.label, net.output_dim)
    heur = HeuristicConfig()
    if args.heuristics:
        with open(args.heuristics) as fh:
            heur = HeuristicConfig.from_json(json.load(fh))
    wf = (make_weight_fn(args.weight_fn, net.input_shape, info)
          if args.weight_fn else None)
    config = RunConfig(mode=args.mode, threshold=args.threshold,
                       samples=args.samples, time_limit=args.time_limit,
                       max_iterations=args.iterations, batch=args.batch,
                       heuristics=heur, bootstrap=args.bootstrap,
                       level=args.level, weight_fn=wf, seed=args.seed,
                       shortcuts=not args.no_shortcuts,
                       tighten=not args.no_tighten, beta=not args.no_beta,
                       reverse_depth=args.reverse_depth, workers=args.workers)
    trace_fh = open(args.trace, "w") if args.trace else None
    try:
        result = premap2(net, lo, hi, spec, config,
                         trace=trace_writer(trace_fh) if trace_fh else None)
    finally:
        if trace_fh:
            trace_fh.close()
    doc = result.to_document({"spec": spec.to_json()})
    if args.verify:
        doc["verification"] = verify_result(doc, net, args.verify, args.seed)
    text = json.dumps(doc, allow_nan=True)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    t = doc["totals"]
    log.info("stop=%s ratio=%.4f v_P=%.6g v_O=%.6g leaves=%d",
             result.stop_reason, t["ratio"], t["v_P"], t["v_O"],
             len(doc["leaves"]))
    if result.stop_reason in ("threshold", "exact"):
        return EXIT_OK
    return EXIT_BUDGET


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return run(args)
    except (OSError, ValueError, KeyError) as err:
        print(f"preimage: error: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
