"""
Replacing classifier weights by speaker means
=============================================

After ``full_info_replace`` the softmax classifier scores an embedding by
its dot product with each speaker's mean embedding, which is exactly the
non-parametric classifier built from those means.
"""

import numpy as np

from gembed import loss

rng = np.random.default_rng(1)
centres = rng.normal(size=(5, 4)) * 3
labels = np.repeat(np.arange(5), 40)
embeddings = centres[labels] + rng.normal(size=(200, 4))

means = loss.speaker_means(embeddings, labels)
head = loss.ClassifierHead(rng.normal(size=(5, 4)), rng.normal(size=5))
replaced = loss.full_info_replace(head, means)

probe = centres[labels] + rng.normal(size=(200, 4))
print("logits equal f.v(s):", np.array_equal(replaced.logits(probe), probe @ means.v.T))
print("same decisions as the non-parametric classifier:",
      np.array_equal(replaced.logits(probe).argmax(axis=1),
                     loss.nonparam_probs(probe, means).argmax(axis=1)))
print(f"accuracy on fresh embeddings: "
      f"{(replaced.logits(probe).argmax(axis=1) == labels).mean():.3f}")

###############################################################################
# Replacement is idempotent and removes the bias, which the
# non-parametric classifier does not have.

again = loss.full_info_replace(replaced, means)
print("idempotent:", np.array_equal(again.theta, replaced.theta), "bias:", replaced.bias)
