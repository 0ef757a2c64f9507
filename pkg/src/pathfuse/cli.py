"""Command-line pipeline: generate data, train sources, assemble, adapt,
fuse, and evaluate, composing through checkpoint files only.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import adapt as adapt_mod
from . import bench, ckpt, data, multipath, nn, precision
from .tensor import Tensor


def _write_fingerprint(out_path: str, args: argparse.Namespace) -> None:
    payload = {k: v for k, v in vars(args).items() if k != "func"}
    with open(out_path + ".config.json", "w") as f:
        json.dump(payload, f, indent=2, default=str)


def cmd_gen_data(args):
    for i, text in enumerate(args.domains):
        spec = data.parse_domain_spec(text, args.samples_per_class, args.seed + 11 * (i + 1))
        ds = data.gen_domain(spec, args.classes)
        path = f"{args.out}/domain{i}_{spec.transform}.ds"
        ckpt.save_dataset(ds, path)
        print(f"wrote {path}: {len(ds)} samples, {args.classes} classes")
    _write_fingerprint(f"{args.out}/gen-data", args)


def cmd_train_source(args):
    ds = ckpt.load_dataset(args.domain)
    arch = nn.ArchSpec(num_classes=int(ds.labels.max()) + 1)
    model = nn.train_source(ds, arch, epochs=args.epochs, lr=args.lr,
                            seed=args.seed, init_seed=args.init_seed)
    ckpt.save(model, args.out)
    _write_fingerprint(args.out, args)
    probs = bench.batched_predict(bench.model_predict_fn(model), ds.images)
    print(f"wrote {args.out}: train accuracy {nn.accuracy(probs, ds.labels):.1f}%")


def cmd_assemble(args):
    sources = [ckpt.load(p) for p in args.sources]
    model = multipath.assemble(sources)
    ckpt.save(model, args.out)
    _write_fingerprint(args.out, args)
    print(f"wrote {args.out}: {model.num_pathways} pathways, {len(model.heads)} heads")


def cmd_adapt(args):
    model = ckpt.load(args.model)
    target = ckpt.load_dataset(args.target)
    cfg = adapt_mod.AdaptConfig(epochs=args.epochs, lr=args.lr,
                                pseudo_label_weight=args.beta_pl,
                                criterion=args.criterion, seed=args.seed)
    adapted = adapt_mod.adapt(model, target.images, cfg)
    ckpt.save(adapted, args.out)
    _write_fingerprint(args.out, args)
    print(f"wrote {args.out}")


def cmd_fuse(args):
    model = ckpt.load(args.model)
    fused = multipath.fuse_model(model)
    rng = np.random.default_rng(args.seed)
    probes = rng.uniform(0, 1, size=(64, model.arch.in_channels, *model.arch.input_hw))
    probes = probes.astype(precision.active_dtype())
    deviation = 0.0
    for a, b in zip(model.forward(Tensor(probes)), fused.forward(Tensor(probes))):
        deviation = max(deviation, float(np.abs(a.data - b.data).max()))
    ckpt.save(fused, args.out)
    _write_fingerprint(args.out, args)
    print(f"wrote {args.out}: max equivalence deviation {deviation:.3e} on 64 probes")


def cmd_eval(args):
    model = ckpt.load(args.model)
    source_tests = {f"source{i}": ckpt.load_dataset(p) for i, p in enumerate(args.sources)}
    target = ckpt.load_dataset(args.target)
    weight_mode = args.weight_mode.replace("-", "_")
    fn = bench.model_predict_fn(model, weight_mode, args.criterion)
    report = bench.evaluate(fn, source_tests, target, flops=bench.flops_count(model),
                            config={k: v for k, v in vars(args).items() if k != "func"})
    print(json.dumps(report.to_dict(), indent=2))
    if args.out_json:
        with open(args.out_json, "w") as f:
            json.dump(report.to_dict(), f, indent=2)


def cmd_flops(args):
    model = ckpt.load(args.model)
    extractor, heads, total = bench.flops_count(model)
    print(json.dumps({"extractor": extractor, "heads": heads, "total": total}))


def cmd_experiment(args):
    with open(args.config) as f:
        raw = json.load(f)
    specs = [data.DomainSpec.from_dict(d) for d in raw.pop("domain_specs", [])] or None
    cfg = bench.ExperimentConfig(domain_specs=specs, **raw)
    rows = bench.run_experiment(cfg)
    print(bench.format_table(rows))
    if args.out:
        bench.write_report(rows, csv_path=args.out + ".csv", json_path=args.out + ".json")
        print(f"wrote {args.out}.csv / {args.out}.json")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pathfuse")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write procedural domain datasets")
    g.add_argument("--domains", nargs="+", required=True,
                   help="transform specs, e.g. identity rotate:25 invert noise:0.2")
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--samples-per-class", type=int, default=700)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-source", help="train one single-pathway source model")
    t.add_argument("--domain", required=True)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--init-seed", type=int, default=0,
                   help="shared across sources that will be assembled together")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_source)

    a = sub.add_parser("assemble", help="assemble source checkpoints into one network")
    a.add_argument("--sources", nargs="+", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_assemble)

    d = sub.add_parser("adapt", help="source-free adaptation on a target dataset")
    d.add_argument("--model", required=True)
    d.add_argument("--target", required=True)
    d.add_argument("--epochs", type=int, default=12)
    d.add_argument("--lr", type=float, default=0.01)
    d.add_argument("--beta-pl", type=float, default=0.3)
    d.add_argument("--criterion", choices=multipath.CRITERIA, default="entropy")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_adapt)

    f = sub.add_parser("fuse", help="reparameterize pathways into single convolutions")
    f.add_argument("--model", required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fuse)

    e = sub.add_parser("eval", help="accuracy/H-score/FLOPs report")
    e.add_argument("--model", required=True)
    e.add_argument("--sources", nargs="+", required=True)
    e.add_argument("--target", required=True)
    e.add_argument("--weight-mode", choices=("per-batch", "per-sample"), default="per-batch")
    e.add_argument("--criterion", choices=multipath.CRITERIA, default="entropy")
    e.add_argument("--out-json", default=None)
    e.set_defaults(func=cmd_eval)

    fl = sub.add_parser("flops", help="FLOPs breakdown of a checkpoint")
    fl.add_argument("--model", required=True)
    fl.set_defaults(func=cmd_flops)

    x = sub.add_parser("experiment", help="method comparison table from a JSON config")
    x.add_argument("--config", required=True)
    x.add_argument("--out", default=None)
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    precision.set_precision(args.precision)
    try:
        args.func(args)
    except (ckpt.CheckpointError, ValueError, FloatingPointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
