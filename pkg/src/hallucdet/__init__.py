"""Feature-space hallucination for few-shot detection heads, at desk scale.

Modules: ``numerics`` (affine/ReLU, softmax CE, SGD schedule, seeded RNG,
gradient checks), ``synthworld`` (synthetic RoI-feature world and batches),
``heads`` (cosine and linear classifier heads, prototype registry),
``hallucinator`` (the generator network and its losses), ``corpns``
(objectness ensemble losses), ``pipeline`` (two-stage training and
evaluation) and ``cli``.
"""

__version__ = "0.1.0"
