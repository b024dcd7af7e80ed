"""Post-hoc Fisher sensitivity pruning of 3D Gaussian splatting scenes."""
