"""Small source-free adaptation run.

Trains three source models on different synthetic domains (shared
initialization so their pathways stay mergeable), assembles them, adapts
the assembled network on an unlabeled fourth domain, and reports source /
target accuracy with the H-score before and after. A few minutes.
"""

from pathfuse import adapt, bench, data, multipath, nn

CLASSES = 10
specs = [
    data.DomainSpec("identity", samples_per_class=160, seed=18),
    data.DomainSpec("rotate", angle=25.0, samples_per_class=160, seed=30),
    data.DomainSpec("invert", samples_per_class=160, seed=44),
    data.DomainSpec("noise", noise_sigma=0.2, samples_per_class=160, seed=58),
]
sets = [data.gen_domain(s, CLASSES) for s in specs]
splits = [data.split(ds, (0.75, 0.25), seed=i) for i, ds in enumerate(sets)]

print("training sources...")
sources = [nn.train_source(splits[i][0], nn.ArchSpec(num_classes=CLASSES),
                           epochs=12, seed=i, init_seed=0) for i in (0, 1, 2)]

model = multipath.assemble(sources)
source_tests = {specs[i].transform: splits[i][1] for i in (0, 1, 2)}
target_test = splits[3][1]


def report(m, tag):
    fn = bench.model_predict_fn(m)
    r = bench.evaluate(fn, source_tests, target_test, flops=bench.flops_count(m))
    print(f"{tag:<12} S {r.source_mean:5.1f}  T {r.target_accuracy:5.1f}  "
          f"H {r.h:5.1f}")
    return r


report(model, "unadapted")
print("adapting on the unlabeled noise domain...")
adapted = adapt.adapt(model, splits[3][0].images,
                      adapt.AdaptConfig(epochs=10, lr=0.01, seed=1))
report(adapted, "adapted")
fused = multipath.fuse_model(adapted)
r = report(fused, "fused")
print(f"fused extractor FLOPs: {r.flops_extractor:,} "
      f"(vs {bench.flops_count(adapted)[0]:,} unfused)")
