"""Surface normals, albedo and specular maps from visible and near-infrared OLAT captures."""
