"""
CTC loss and greedy decoding
============================

The alpha-beta recursion scores every alignment of a target against a
lattice of per-frame scores. Two uniform frames over {blank, a} give three
valid paths out of four, so the loss is -log(3/4).
"""

import math

import numpy as np

from jointser import VOCAB, ctc_greedy_decode, ctc_loss

loss, grad = ctc_loss(np.zeros((2, 2)), [1])
print(f"loss {loss:.6f}  expected {-math.log(0.75):.6f}")

# the gradient w.r.t. the scores is softmax minus occupancy, so rows sum to 0
print("grad rows sum to", grad.sum(axis=1))

######################################################################
# Greedy decoding takes the argmax per frame, merges repeats, drops blanks.

target = VOCAB.encode("hi")
path = [target[0], target[0], 0, target[1], 0]
scores = np.full((len(path), len(VOCAB)), -5.0)
scores[np.arange(len(path)), path] = 5.0
print(repr(ctc_greedy_decode(scores)))
print("loss on a confident lattice:", ctc_loss(scores, target)[0])
