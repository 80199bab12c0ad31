"""Markerless quadruped pose estimation from depth images."""
