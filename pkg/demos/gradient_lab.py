"""Why the relativistic loss pushes harder: CE vs RCE gradients on logits.

    python3 demos/gradient_lab.py
"""

import numpy as np

from rapforge import losses as L

# One confident-clean, confident-wrong pair over three classes, true class 0.
a = np.array([[4.0, 0.0, -1.0]])        # clean logits: class 0 wins
a_prime = np.array([[-2.0, 3.0, 1.0]])  # perturbed logits: class 0 loses
y = np.array([0])

pair = L.LogitPair(a, a_prime, y)
for name, loss, grad in (("CE ", L.ce_loss(a_prime, y), L.analytic_ce_grad(a_prime, y)[0]),
                         ("RCE", L.rce_loss(pair), L.analytic_rce_grad(pair)[0])):
    print(f"{name} loss {loss.item():.3f}  grad {grad.round(4)}  l2 {np.linalg.norm(grad):.3f}")
# RCE wins on the true-class component (-0.9999 vs -0.9941) yet its l2 norm is
# smaller: CE piles the wrong-class mass on class 1, RCE spreads it.

# Over many sampled pairs, the true-class component of the RCE gradient is
# always the larger one; the l2 norm is not, once there are many classes.
rng = np.random.default_rng(0)
for c in (2, 10):
    a, ap, y = L.sample_precondition_pairs(5000, c, rng)
    reps = L.dominance_check(L.LogitPair(a, ap, y))
    print(f"c={c:2d}: y-component larger in {np.mean([r.dominant_y for r in reps]):.2%}, "
          f"l2 norm larger in {np.mean([r.dominant for r in reps]):.2%}")

# Sign ascent on a small linear classifier: loss and input-gradient norm per step.
print("step  ce_loss  rce_loss  ce_grad  rce_grad")
for row in L.ascent_trajectory(steps=10):
    print(f"{row['step']:4d}  {row['ce_loss']:7.3f}  {row['rce_loss']:8.3f}  "
          f"{row['ce_grad_norm']:7.3f}  {row['rce_grad_norm']:8.3f}")
