from .simworld import SceneSpec, SyntheticDetector, export_dataset, generate_scene, seed_map

__all__ = ["SceneSpec", "SyntheticDetector", "export_dataset", "generate_scene", "seed_map"]
