"""Modality-level occlusion sensitivity for multimodal segmentation."""
