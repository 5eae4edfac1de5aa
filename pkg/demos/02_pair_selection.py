"""Picking which attribute pair to ask about.

Region A is a white dog standing on grass, region B a black dog running on a
road. The selector multiplies three things for every ordered pair (i, j):
how much i fires on A but not B and j on B but not A, how alike the two
attributes are as answers to one question, and how visually unalike they are.
"""

import numpy as np

from discrimq.pairselect import SelectorConfig, rank_pairs_topk

names = ["dog", "white", "black", "stand", "run", "grass", "road"]
vA = np.array([0.97, 0.92, 0.05, 0.85, 0.10, 0.80, 0.15])
vB = np.array([0.96, 0.06, 0.90, 0.12, 0.88, 0.10, 0.75])

# families: colour {1, 2}, action {3, 4}, place {5, 6}; answers of one question share a family
family = [0, 1, 1, 2, 2, 3, 3]
q_sim = np.array([[1.0 if fi == fj else 0.0 for fj in family] for fi in family])
v_sim = np.eye(len(names)) * 0.5

for alpha, beta, label in ((0.0, 0.0, "contrast only"), (2.0, 1.0, "with both similarity terms")):
    print(f"\n{label} (alpha={alpha}, beta={beta})")
    for p in rank_pairs_topk(vA, vB, q_sim, v_sim, SelectorConfig(alpha, beta, top_k=4)):
        print(f"  {names[p.i]:>6s} / {names[p.j]:<6s} contrast {p.contrast:.3f}  score {p.score:.3f}")
