"""Semi-supervised panoptic segmentation of particle scenes.

A small dual-decoder FCN predicts a semantic segmentation map together with
per-instance distance-transform representations and an orientation field.
Consistency between the two decoder outputs ("ConsInstancy") provides a
training signal on unlabelled images. The package ships a deterministic
synthetic particle-scene generator, the full loss stack, a training loop
with Seg/Inst/ConsInst ablation variants, panoptic post-processing, and the
metric suite (overall accuracy, mean F1, instance F1, panoptic quality).
"""

__version__ = "0.1.0"
