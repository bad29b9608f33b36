"""recurforge: mine recurring object instances out of unlabeled detection
corpora and assemble them into supervised object-composition datasets.

The pipeline: load detected objects and their instance-retrieval features,
build a top-k cosine index, keep neighbor pairs inside a similarity band,
and emit (scene, references, target) training examples plus the analysis
and evaluation tooling around them.
"""

__version__ = "0.1.0"
