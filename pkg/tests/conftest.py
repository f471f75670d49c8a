import pytest

from atgan.attacks import composite_view
from atgan.config import load_config
from atgan.data import make_toy_dataset
from atgan.trainer import restore_models, train_atgan, train_classifier


@pytest.fixture(scope="session")
def toy_data():
    return make_toy_dataset(0)


@pytest.fixture(scope="session")
def trained_toy_atgan(toy_data):
    """One toy adversarial-GAN training run shared by evaluation tests."""
    train, test = toy_data
    config = load_config("toy-fast")
    result = train_atgan(config, train)
    restored = restore_models(result.checkpoint)
    g, d = restored["generator"], restored["discriminator"]
    return {"generator": g, "discriminator": d,
            "view": composite_view(g, d), "config": config,
            "train": train, "test": test, "result": result}


@pytest.fixture(scope="session")
def trained_toy_classifier(toy_data):
    train, test = toy_data
    config = load_config("toy-at")
    result = train_classifier(config, train)
    model = restore_models(result.checkpoint)["model"]
    return {"model": model, "config": config, "train": train, "test": test}
