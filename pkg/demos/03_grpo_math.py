"""Group-relative advantages and the clipped GRPO objective on a hand-made group.

Run: python3 demos/03_grpo_math.py
"""

import torch

from desktts import rlpost

rewards = [0.0, -0.25, -0.25, -1.0]  # negative WER of four sampled candidates
adv = rlpost.compute_advantages(rewards)
print("advantages:", [round(a, 3) for a in adv])

# per-token log-probs under the current, behaviour and reference policies
cur = [torch.tensor([-1.0, -0.5], requires_grad=True) for _ in rewards]
old = [torch.tensor([-1.2, -0.5]) for _ in rewards]
ref = [torch.tensor([-1.0, -0.7]) for _ in rewards]
obj, stats = rlpost.grpo_objective(cur, old, ref, adv, clip_epsilon=0.2, kl_coefficient=0.02)
print(f"objective {obj.item():.4f}, kl {stats['kl']:.4f}, clipped fraction {stats['clip_fraction']:.2f}")
