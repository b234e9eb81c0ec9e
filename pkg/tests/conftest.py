import pytest

from app.core_model import ATTACKS, BENIGN, FBS, AttackerLevel, Label, Layer
from app.fbs_detect import PacketModelConfig, TraceModelConfig
from app.msa_graph import SageConfig
from app.pipeline import LayerArtifacts, ModelBundle, train_fbs_layer, train_msa_layer
from app.simulator import ScenarioSpec, gen_dataset

TOY_PACKET_CONFIG = PacketModelConfig(hidden=6, len_seq=12, epochs=6, lr=0.3, seed=3)
TOY_TRACE_CONFIG = TraceModelConfig(epochs=200, lr=0.5, seed=3)
TOY_SAGE_CONFIG = SageConfig(hidden=16, epochs=40, lr=0.2, seed=3)


@pytest.fixture(scope="session")
def fbs_traces():
    """Ten benign and ten level-0 FBS traces."""
    specs = [
        ScenarioSpec(BENIGN, n_traces=10, master_seed=7),
        ScenarioSpec(FBS, AttackerLevel.NAIVE, n_traces=10, master_seed=7),
    ]
    return gen_dataset(specs, workers=1).traces


@pytest.fixture(scope="session")
def msa_traces():
    """Three benign traces plus two level-3 traces of every attack."""
    specs = [ScenarioSpec(BENIGN, n_traces=3, master_seed=11)]
    specs += [ScenarioSpec(Label.msa(a), AttackerLevel.MULTI_STEP, n_traces=2, master_seed=11) for a in ATTACKS]
    return gen_dataset(specs, workers=1).traces


@pytest.fixture(scope="session")
def fbs_bundle(fbs_traces):
    layers = {layer: train_fbs_layer(fbs_traces, layer, TOY_PACKET_CONFIG, TOY_TRACE_CONFIG)
              for layer in (Layer.NAS, Layer.RRC)}
    return ModelBundle(layers)


@pytest.fixture(scope="session")
def msa_bundle(msa_traces):
    layers = {}
    for layer in (Layer.NAS, Layer.RRC):
        model, bank, _ = train_msa_layer(msa_traces, layer, TOY_SAGE_CONFIG, require_classes=[])
        layers[layer] = LayerArtifacts(layer, msa_sage=model, msa_bank=bank)
    return ModelBundle(layers)


DESK_SAGE_CONFIG = SageConfig(hidden=32, epochs=80, lr=0.2, seed=31)


def msa_classes(n_traces, seed):
    specs = [ScenarioSpec(BENIGN, n_traces=n_traces, master_seed=seed)]
    specs += [ScenarioSpec(Label.msa(a), AttackerLevel.MULTI_STEP, n_traces=n_traces, master_seed=seed)
              for a in ATTACKS]
    return gen_dataset(specs, workers=1).traces


@pytest.fixture(scope="session")
def msa_desk():
    """Five traces of each of the 22 classes to train on, five unseen ones to test on, and the trained bundle."""
    train, test = msa_classes(5, seed=31), msa_classes(5, seed=32)
    layers = {}
    for layer in (Layer.NAS, Layer.RRC):
        model, bank, _ = train_msa_layer(train, layer, DESK_SAGE_CONFIG, require_classes=[])
        layers[layer] = LayerArtifacts(layer, msa_sage=model, msa_bank=bank)
    return train, test, ModelBundle(layers)
