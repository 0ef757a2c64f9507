"""How per-head uncertainty turns into combination weights.

Assembles one strong and one weak head over shared data and shows that the
softmax over negated uncertainty gives the confident head the larger weight,
for each of the three criteria. Runs in under a minute.
"""

import numpy as np

from pathfuse import data, multipath, nn
from pathfuse.tensor import Tensor

CLASSES = 10
ds = data.gen_domain(data.DomainSpec(samples_per_class=80, seed=4), CLASSES)
train, test = data.split(ds, (0.75, 0.25), seed=0)

strong = nn.train_source(train, nn.ArchSpec(num_classes=CLASSES),
                         epochs=8, seed=0, init_seed=0)
weak = nn.train_source(train, nn.ArchSpec(num_classes=CLASSES),
                       epochs=1, seed=1, init_seed=0)
model = multipath.assemble([strong, weak])

x = Tensor(test.images)
for criterion in multipath.CRITERIA:
    probs, rep = multipath.predict(model, x, weight_mode="per_batch",
                                   criterion=criterion)
    acc = nn.accuracy(probs, test.labels)
    print(f"{criterion:<11} scores {np.round(rep.per_model_score, 3)}  "
          f"weights {np.round(rep.weights, 3)}  combined acc {acc:.1f}%")

uniform = np.full(2, 0.5)
probs, _ = multipath.predict(model, x, weight_mode="fixed",
                             fixed_weights=uniform)
print(f"uniform 50/50 combined acc {nn.accuracy(probs, test.labels):.1f}% "
      "(reweighting should match or beat this)")
