"""Solid-state LiDAR odometry and occupancy mapping."""
