import pytest

from dualharm import data


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """Small procedural corpus shared across tests: 16 photos, 8 paintings."""
    root = tmp_path_factory.mktemp("corpus")
    data.generate_synthetic_sources(root, num_photos=16, num_paintings=8, seed=123, size=64)
    return root


@pytest.fixture(scope="session")
def manifest16(corpus_dir):
    path = data.build_dataset(
        corpus_dir / "photos", corpus_dir / "paintings", corpus_dir / "dataset", seed=7
    )
    manifest = data.load_manifest(path)
    assert len(manifest.records) == 16
    return manifest
