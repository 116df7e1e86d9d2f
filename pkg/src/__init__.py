# Self-Cascade Diffusion Package
