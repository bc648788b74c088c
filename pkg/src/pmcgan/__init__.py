"""Multimodal cascaded GAN for pedestrian synthesis."""
