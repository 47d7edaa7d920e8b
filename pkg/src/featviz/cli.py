"""``featviz`` command line: forward, attribute, occlude, cam, reconstruct, inspect, replay.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
Every written file gets a JSON manifest alongside it (``<out>.json``, or
``manifest.json`` inside a reconstruction output directory) holding the
resolved argv; ``featviz replay <manifest>`` reruns it bit-exactly.
"""

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attribgraph import AttributionConfig, Gradient, LrpEpsilon, ReluRule, attribute, cam
from .dreamer import (MatchRepresentation, MaximizeUnit, OptConfig, RandomUniform, RegConfig,
                      Zeros, reconstruct)
from .errors import FeatVizError, NumericalError
from .netrunner import ClassUnit, class_score, forward, layer_type_name, load_network
from .perturb import (OcclusionConfig, RandomFill, SolidFill, WORKERS_ENV, occlusion_map,
                      resolve_workers)
from .tensor import load_fvt, save_fvt
from .vizio import (AbsMax, Bilinear, Nearest, PercentileClip, RenderSpec, read_image, render,
                    write_image, write_tensor_image)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _pair_arg(text):
    try:
        a, b = text.lower().split("x")
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None


def _upsample_arg(text):
    kind, _, factor = text.partition(":")
    if kind not in ("nearest", "bilinear") or not factor.isdigit() or int(factor) < 1:
        raise argparse.ArgumentTypeError(f"expected nearest:F or bilinear:F, got {text!r}")
    return text


def _norm_arg(text):
    if text == "absmax":
        return text
    if text.startswith("pct:"):
        try:
            q = float(text[4:])
        except ValueError:
            q = -1
        if 0 < q <= 100:
            return text
    raise argparse.ArgumentTypeError(f"expected absmax or pct:Q with 0 < Q <= 100, got {text!r}")


def _fill_arg(text):
    if text == "gray":
        return text
    if text.startswith("rgb:") and len(text[4:].split(",")) == 3:
        if all(v.strip().isdigit() and int(v) <= 255 for v in text[4:].split(",")):
            return text
    if text.startswith("random:") and text[7:].isdigit():
        return text
    raise argparse.ArgumentTypeError(f"expected gray, rgb:R,G,B or random:SEED, got {text!r}")


def _init_arg(text):
    if text == "zeros" or (text.startswith("rand:") and text[5:].isdigit()):
        return text
    raise argparse.ArgumentTypeError(f"expected zeros or rand:SEED, got {text!r}")


def _add_render(p):
    p.add_argument("--colormap", choices=("signed", "grayscale", "hot"), default="signed")
    p.add_argument("--norm", type=_norm_arg, default="absmax",
                   help="absmax (default) or pct:Q percentile clipping")


def build_parser():
    parser = _Parser(prog="featviz", description="Visualize what a small CNN has learned.")
    parser.add_argument("--version", action="version", version=f"featviz {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("forward", help="class scores for an image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--topk", type=int, default=5)

    p = sub.add_parser("attribute", help="backward attribution map (deconvnet/backprop/guided/LRP)")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="class_index", type=int)
    p.add_argument("--relu-rule", choices=[r.value for r in ReluRule], default="backprop")
    p.add_argument("--conv-rule", choices=("gradient", "lrp"), default="gradient")
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--out", required=True)
    p.add_argument("--fvt", action="store_true", help="also write the raw map as <out>.fvt")
    _add_render(p)

    p = sub.add_parser("occlude", help="occlusion sensitivity heatmap")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="class_index", type=int)
    p.add_argument("--box", type=_pair_arg, default=(3, 3))
    p.add_argument("--stride", type=_pair_arg, default=(1, 1))
    p.add_argument("--fill", type=_fill_arg, default="gray")
    p.add_argument("--workers", type=int, help=f"threads (default: ${WORKERS_ENV} or 1)")
    p.add_argument("--out", required=True)
    p.add_argument("--fvt", action="store_true")
    _add_render(p)

    p = sub.add_parser("cam", help="class activation map (GAP-tailed networks)")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="class_index", type=int)
    p.add_argument("--upsample", type=_upsample_arg,
                   help="nearest:F or bilinear:F (default: nearest at the input scale)")
    p.add_argument("--out", required=True)
    p.add_argument("--fvt", action="store_true")
    _add_render(p)

    p = sub.add_parser("reconstruct", help="activation maximization or representation inversion")
    p.add_argument("--model", required=True)
    goal = p.add_mutually_exclusive_group(required=True)
    goal.add_argument("--maximize-class", type=int)
    goal.add_argument("--invert-layer", type=int)
    p.add_argument("--reference", help=".fvt code to match (with --invert-layer)")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--lambda-p", type=float, default=0.0)
    p.add_argument("--p", type=float, default=6.0)
    p.add_argument("--lambda-tv", type=float, default=0.0)
    p.add_argument("--init", type=_init_arg, default="zeros")
    p.add_argument("--record-every", type=int, default=0)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("inspect", help="layer table with shapes and parameter counts")
    p.add_argument("--model", required=True)

    p = sub.add_parser("replay", help="rerun the command recorded in a manifest")
    p.add_argument("manifest")
    return parser


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load(args):
    net = load_network(Path(args.model).read_bytes())
    img = read_image(Path(args.image).read_bytes())
    return net, img


def _top_class(net, img):
    tape = forward(net, img)
    return int(np.argmax(tape[net.score_layer].output.reshape(-1)))


def _render_spec(args, upsample=None):
    norm = AbsMax() if args.norm == "absmax" else PercentileClip(float(args.norm[4:]))
    return RenderSpec(args.colormap, norm, upsample)


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _manifest(args, argv, extra, outputs):
    inputs = {k: {"path": getattr(args, k), "sha256": _sha256(getattr(args, k))}
              for k in ("model", "image", "reference") if getattr(args, k, None)}
    return {"subcommand": args.command, "argv": argv, "inputs": inputs, "outputs": outputs,
            "version": __version__, **extra}


def _write_map_outputs(args, argv, image, raw, sidecar, extra):
    out = Path(args.out)
    out.write_bytes(write_image(image))
    outputs = [str(out)]
    if args.fvt:
        out.with_suffix(".fvt").write_bytes(raw)
        out.with_suffix(".fvt.json").write_text(sidecar)
        outputs += [str(out.with_suffix(".fvt")), str(out.with_suffix(".fvt.json"))]
    _write_json(f"{out}.json", _manifest(args, argv, extra, outputs))


def cmd_forward(args, argv, stdout):
    net, img = _load(args)
    tape = forward(net, img)
    scores = tape[net.score_layer].output.reshape(-1).astype(np.float64)
    probs = np.exp(scores - scores.max())
    probs /= probs.sum()
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:max(args.topk, 1)]
    for rank, i in enumerate(order, 1):
        label = net.labels[i] if net.labels else str(i)
        print(f"{rank}\t{i}\t{label}\t{scores[i]:.6g}\t{probs[i]:.6g}", file=stdout)


def cmd_attribute(args, argv, stdout):
    net, img = _load(args)
    cls = _top_class(net, img) if args.class_index is None else args.class_index
    rule = LrpEpsilon(args.epsilon) if args.conv_rule == "lrp" else Gradient()
    cfg = AttributionConfig(ReluRule(args.relu_rule), rule, ClassUnit(cls))
    amap = attribute(net, img, cfg)
    extra = {"class_index": cls, "score": class_score(forward(net, img), cls),
             "config": cfg.describe()}
    _write_map_outputs(args, argv, render(amap, _render_spec(args)), amap.to_fvt(),
                       amap.sidecar(), extra)


def _fill_from(text, channels):
    if text == "gray":
        return SolidFill(0.5)
    if text.startswith("random:"):
        return RandomFill(int(text[7:]))
    rgb = [int(v) / 255 for v in text[4:].split(",")]
    if channels == 1:
        return SolidFill(sum(rgb) / 3)
    return SolidFill(tuple(rgb))


def cmd_occlude(args, argv, stdout):
    net, img = _load(args)
    cls = _top_class(net, img) if args.class_index is None else args.class_index
    workers = resolve_workers(args.workers)
    cfg = OcclusionConfig(args.box, args.stride, _fill_from(args.fill, img.shape[1]),
                          ClassUnit(cls))
    hm = occlusion_map(net, img, cfg, workers=workers)
    # worker count is excluded: it never changes the result
    extra = {"class_index": cls, "heatmap": hm.meta}
    _write_map_outputs(args, argv, render(hm, _render_spec(args)), hm.to_fvt(), hm.sidecar(),
                       extra)


def cmd_cam(args, argv, stdout):
    net, img = _load(args)
    cls = _top_class(net, img) if args.class_index is None else args.class_index
    hm = cam(net, img, cls)
    if args.upsample:
        kind, _, factor = args.upsample.partition(":")
    else:
        kind, factor = "nearest", max(1, int(round(min(hm.meta["scale"]))))
    up = (Nearest if kind == "nearest" else Bilinear)(int(factor))
    extra = {"class_index": cls, "heatmap": hm.meta, "upsample": f"{kind}:{factor}"}
    _write_map_outputs(args, argv, render(hm, _render_spec(args, up)), hm.to_fvt(),
                       hm.sidecar(), extra)


def cmd_reconstruct(args, argv, stdout):
    net = load_network(Path(args.model).read_bytes())
    if args.maximize_class is not None:
        objective = MaximizeUnit(ClassUnit(args.maximize_class))
    else:
        if not args.reference:
            raise UsageError("--invert-layer needs --reference R.fvt")
        objective = MatchRepresentation(args.invert_layer, load_fvt(Path(args.reference).read_bytes()))
    init = Zeros() if args.init == "zeros" else RandomUniform(int(args.init[5:]))
    reg = RegConfig(args.lambda_p, args.p, args.lambda_tv)
    opt = OptConfig(args.steps, args.lr, init, args.record_every)
    result = reconstruct(net, objective, reg, opt)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for step, snap in result.trajectory:
        path = out / f"step_{step:06d}.fvt"
        path.write_bytes(save_fvt(snap))
        outputs.append(str(path))
    final = result.final
    lo, hi = float(final.min()), float(final.max())
    view = (final - lo) / (hi - lo) if hi > lo else np.zeros_like(final)
    if final.shape[1] in (1, 3):
        (out / "final.ppm").write_bytes(write_tensor_image(view))
        outputs.append(str(out / "final.ppm"))
    (out / "final.fvt").write_bytes(save_fvt(final))
    outputs.append(str(out / "final.fvt"))
    extra = json.loads(result.manifest(objective, reg, opt))
    _write_json(out / "manifest.json", _manifest(args, argv, extra, outputs))


def cmd_inspect(args, argv, stdout):
    net = load_network(Path(args.model).read_bytes())
    c, h, w = net.input_shape
    print(f"input\t{c}x{h}x{w}", file=stdout)
    total = 0
    for i, layer in enumerate(net.layers):
        count = sum(int(b.size) for b in layer.blobs().values())
        total += count
        shape = "x".join(map(str, net.shapes[i + 1]))
        print(f"{i}\t{layer_type_name(layer)}\t{shape}\t{count}", file=stdout)
    print(f"total parameters\t{total}", file=stdout)


def cmd_replay(args, argv, stdout):
    doc = json.loads(Path(args.manifest).read_text())
    if "argv" not in doc:
        raise UsageError(f"{args.manifest} has no recorded argv")
    return _dispatch(doc["argv"], stdout)


COMMANDS = {"forward": cmd_forward, "attribute": cmd_attribute, "occlude": cmd_occlude,
            "cam": cmd_cam, "reconstruct": cmd_reconstruct, "inspect": cmd_inspect,
            "replay": cmd_replay}


def _dispatch(argv, stdout):
    args = build_parser().parse_args(argv)
    return COMMANDS[args.command](args, list(argv), stdout)


def run(argv=None, stdout=None, stderr=None):
    """Execute one CLI invocation and return its exit code."""
    argv = sys.argv[1:] if argv is None else list(argv)
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        _dispatch(argv, stdout)
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    except UsageError as exc:
        print(str(exc).rstrip(), file=stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"featviz: numerical failure: {exc}", file=stderr)
        return EXIT_NUMERIC
    except (FeatVizError, IndexError, OSError, ValueError) as exc:
        print(f"featviz: error: {exc}", file=stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
