"""
Finite-difference gradient check
================================

Every trainable parameter of each architecture is perturbed by +-eps in
float64 and the central difference is compared with autograd. Scores are
norm-wise per parameter group; the worst single entry is shown too.
"""

import torch

from jointser import SpeechModel, grad_check
from jointser.cli import GRADCHECK_DIMS, gradcheck_batch

batch = gradcheck_batch(seed=0, n_mels=GRADCHECK_DIMS.n_mels)
for arch in ("asr_baseline", "ser_baseline", "joint"):
    torch.manual_seed(0)
    report = grad_check(SpeechModel(arch, GRADCHECK_DIMS), batch, eps=1e-5, tol=1e-4)
    print(f"{arch:13s} groups {len(report.max_rel_err):2d}  worst {report.worst:.1e}  "
          f"worst entry {max(report.elementwise.values()):.1e}  passed {report.passed}")
