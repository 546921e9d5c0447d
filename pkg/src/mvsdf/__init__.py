"""Sparse-view reconstruction: plane-sweep stereo probability volumes supervising a voxel SDF."""
