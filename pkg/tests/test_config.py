import pytest
from hypothesis import given, settings, strategies as st

from salmod.config import ConfigFileError, ExperimentConfig, dumps, loads
from salmod.data import DataError
from salmod.model import ConfigError

safe_text = st.text(st.characters(whitelist_categories=("Ll", "Lu", "Nd"), whitelist_characters="_-/."),
                    min_size=0, max_size=12)


@st.composite
def configs(draw):
    cfg = ExperimentConfig()
    cfg.data.num_classes = draw(st.integers(1, 100))
    cfg.data.subtlety = draw(st.floats(0.01, 1.0))
    cfg.data.seed = draw(st.integers(0, 2**31))
    cfg.net.variant = draw(st.sampled_from(["baseline_rgb", "early_fusion", "delayed_fusion"]))
    cfg.net.skip = draw(st.booleans())
    cfg.net.saliency_width = draw(st.sampled_from([0.5, 0.75, 1.0]))
    cfg.train.lr = draw(st.floats(1e-6, 1.0))
    cfg.saliency.method = draw(st.sampled_from(["none", "white", "oracle", "files"]))
    cfg.saliency.quality = draw(st.floats(0.0, 1.0))
    cfg.protocol.k_list = draw(st.sampled_from(["1,2", "5", "1,2,3,K"]))
    cfg.protocol.name = draw(safe_text)
    cfg.output.dir = draw(safe_text.filter(bool))
    return cfg


@settings(max_examples=60)
@given(configs())
def test_parse_serialize_parse_roundtrip(cfg):
    text = dumps(cfg)
    again = loads(text)
    assert again == cfg
    assert dumps(again) == text


def test_comments_blank_lines_and_types():
    cfg = loads("# header\n\nnet.fusion_level = 3  # inline\nnet.skip = false\ntrain.lr=0.5\n")
    assert cfg.net.fusion_level == 3 and cfg.net.skip is False and cfg.train.lr == 0.5


@pytest.mark.parametrize("text, msg", [
    ("net.depth = 3", "unknown key"),
    ("bogus.x = 1", "unknown key"),
    ("net = 1", "unknown key"),
    ("net.fusion_level", "key = value"),
    ("net.fusion_level = two", "integer"),
    ("net.skip = maybe", "boolean"),
    ("train.lr = fast", "number"),
])
def test_parse_errors(text, msg):
    with pytest.raises(ConfigFileError, match=msg):
        loads(text)


def test_fusion_without_saliency_source_is_invalid():
    with pytest.raises(ConfigFileError, match="saliency source"):
        loads("net.variant = delayed_fusion\n").validate()
    loads("net.variant = baseline_rgb\n").validate()


def test_validation_reaches_every_section(tmp_path):
    with pytest.raises(DataError, match="samples_per_class"):
        loads("data.samples_per_class = 8\nnet.variant = baseline_rgb").validate()
    with pytest.raises(ConfigError):
        loads("net.variant = baseline_rgb\nnet.init = pretrained").validate()
    with pytest.raises(ConfigFileError, match="k_list"):
        loads("net.variant = baseline_rgb\nprotocol.k_list = 1,x").validate()
    with pytest.raises(ConfigFileError, match="does not exist"):
        loads(f"saliency.method = import\nsaliency.folder = {tmp_path / 'nope'}").validate()
    with pytest.raises(ConfigFileError, match="only valid"):
        loads(f"saliency.method = white\nsaliency.folder = {tmp_path}").validate()
    with pytest.raises(ConfigFileError, match="index.csv"):
        loads(f"net.variant = baseline_rgb\ndata.folder = {tmp_path}").validate()
    with pytest.raises(ConfigFileError, match="method"):
        loads("saliency.method = gbvs").validate()


def test_network_derives_sizes_and_drops_pool_for_baseline():
    cfg = loads("net.variant = baseline_rgb\ndata.height = 48\ndata.num_classes = 7")
    net = cfg.network()
    assert (net.height, net.num_classes, net.pool_position) == (48, 7, None)
