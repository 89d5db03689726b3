"""Hungarian matching and the set-prediction loss on hand-sized examples."""

import itertools

import numpy as np

from tomformer.matching import BoundingBox, cost_matrix, giou, hungarian, iou, set_loss
from tomformer.tensor import Tensor

# two unit squares sharing an edge: no overlap, but the hull is fully covered
a = BoundingBox.from_corners(0, 0, 1, 1)
b = BoundingBox.from_corners(1, 0, 2, 1)
print("iou", iou(a, b), "giou", giou(a, b))

# far apart, the hull is mostly empty and GIoU heads towards -1
c = BoundingBox.from_corners(50, 50, 50.1, 50.1)
print("giou far", giou(a, c))

# 4 predictions, 3 targets: compare the matcher with every injection
cost = np.array([[4.0, 1.0, 3.0],
                 [2.0, 0.0, 5.0],
                 [3.0, 2.0, 2.0],
                 [1.0, 4.0, 6.0]])
print(cost)
best = min(sum(cost[p, t] for t, p in enumerate(perm)) for perm in itertools.permutations(range(4), 3))
found = hungarian(cost)
print("hungarian", found.pairs, "cost", found.cost(cost), "brute force", best)

# set loss for 5 queries over 8 classes + no-object, two targets
rng = np.random.default_rng(3)
logits = Tensor(rng.normal(size=(5, 9)), requires_grad=True)
boxes = Tensor(rng.uniform(0.2, 0.8, size=(5, 4)) * np.array([1, 1, 0.3, 0.3]), requires_grad=True)
targets = [(3, BoundingBox(0.3, 0.4, 0.2, 0.2)), (6, BoundingBox(0.7, 0.6, 0.1, 0.3))]
print("matching costs\n", cost_matrix((logits, boxes), targets).round(3))

out = set_loss((logits, boxes), targets)
print("matched (query, target):", out.assignment.pairs)
for k, v in out.as_dict().items():
    print(f"  {k:<10} {v:.6f}")
out.loss.backward()
print("box gradient rows of unmatched queries are zero:",
      [int(q) for q in range(5) if not np.any(boxes.grad[q])])

# shuffling the queries changes nothing once the matcher re-runs
perm = rng.permutation(5)
again = set_loss((Tensor(logits.data[perm]), Tensor(boxes.data[perm])), targets)
print("total after shuffling queries:", again.total, "difference", again.total - out.total)
