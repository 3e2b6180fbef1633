"""Free-form lesion synthesis at desk scale.

Pipeline: a PCA shape model of lesion contours proposes masks, a
partial-convolution U-Net generator paints lesion texture into the masked
region under a Wasserstein critic, co-occurrence texture features score
realism, and a small segmenter quantifies the value of the synthetic
slices as training augmentation.
"""

__version__ = "0.1.0"
