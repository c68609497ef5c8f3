import pytest
import torch
from PIL import Image

from d24fad.errors import ConfigError, ShapeError
from d24fad.teacher import (FeaturePyramid, TeacherSpec, extract_pyramid, load_teacher, parameter_checksum,
                            preprocess_image, resize_map)


def test_random_frozen_is_deterministic():
    a = load_teacher(TeacherSpec(seed=7))
    b = load_teacher(TeacherSpec(seed=7))
    assert parameter_checksum(a) == parameter_checksum(b)
    assert parameter_checksum(a) != parameter_checksum(load_teacher(TeacherSpec(seed=8)))


def test_loading_leaves_global_rng_alone():
    torch.manual_seed(123)
    x = torch.rand(1)
    torch.manual_seed(123)
    load_teacher(TeacherSpec(seed=5))
    assert torch.equal(torch.rand(1), x)


def test_frozen_and_eval(teacher32):
    assert all(not p.requires_grad for p in teacher32.parameters())
    teacher32.train()
    assert not teacher32.training


def test_tiny_shapes(teacher32):
    assert teacher32.level_shapes() == [(8, 32, 32), (16, 16, 16), (32, 8, 8)]


@pytest.mark.slow
def test_reference_backbone_shapes():
    spec = TeacherSpec(backbone_name="wide_resnet50_2", layer_ids=["layer1", "layer2", "layer3"],
                       weights_source="random_frozen", input_size=128)
    t = load_teacher(spec)
    pyrs = extract_pyramid(t, torch.randn(4, 3, 128, 128))
    assert len(pyrs) == 4
    for p in pyrs:
        assert p.shapes() == [(256, 32, 32), (512, 16, 16), (1024, 8, 8)]


def test_unknown_backbone():
    with pytest.raises(ConfigError):
        load_teacher(TeacherSpec(backbone_name="foo"))


def test_bad_layer_ids():
    with pytest.raises(ConfigError):
        load_teacher(TeacherSpec(layer_ids=["stage1", "stage9"]))
    with pytest.raises(ConfigError):
        load_teacher(TeacherSpec(layer_ids=["stage2", "stage1"]))


def test_missing_weight_file_names_path(tmp_path, monkeypatch):
    monkeypatch.setenv("D24FAD_WEIGHTS_DIR", str(tmp_path))
    with pytest.raises(FileNotFoundError, match=str(tmp_path)):
        load_teacher(TeacherSpec(weights_source="imagenet_pretrained"))
    with pytest.raises(FileNotFoundError, match="nowhere.pth"):
        load_teacher(TeacherSpec(weights_source="file_path", weights_path=str(tmp_path / "nowhere.pth")))


def test_weight_file_roundtrip(tmp_path, monkeypatch):
    src = load_teacher(TeacherSpec(seed=11))
    state = {k[len("body."):]: v for k, v in src.state_dict().items()}
    torch.save(state, tmp_path / "tiny.pth")
    monkeypatch.setenv("D24FAD_WEIGHTS_DIR", str(tmp_path))
    loaded = load_teacher(TeacherSpec(seed=0, weights_source="imagenet_pretrained"))
    x = torch.randn(2, 3, 32, 32)
    for a, b in zip(src(x), loaded(x)):
        assert torch.equal(a, b)


def test_extract_pyramid_properties(teacher32):
    x = torch.randn(1, 3, 32, 32)
    pyrs = extract_pyramid(teacher32, torch.cat([x, x, torch.zeros_like(x)]))
    assert pyrs[0].source == "teacher" and pyrs[0].layer_ids == ["stage1", "stage2", "stage3"]
    for a, b, z in zip(pyrs[0].levels, pyrs[1].levels, pyrs[2].levels):
        assert torch.equal(a, b)
        assert not torch.equal(a, z)
    sizes = [s[1] for s in pyrs[0].shapes()]
    assert sizes == sorted(sizes, reverse=True)


def test_extract_does_not_touch_weights(teacher32):
    before = parameter_checksum(teacher32)
    extract_pyramid(teacher32, torch.randn(3, 3, 32, 32))
    assert parameter_checksum(teacher32) == before


def test_wrong_input_size(teacher32):
    with pytest.raises(ShapeError):
        teacher32(torch.randn(1, 3, 16, 16))
    with pytest.raises(ShapeError):
        teacher32(torch.randn(1, 1, 32, 32))


def test_pyramid_validation():
    with pytest.raises(ShapeError):
        FeaturePyramid([], [], "teacher")
    with pytest.raises(ValueError):
        FeaturePyramid([torch.zeros(1, 1, 1)], ["a"], "other")


def test_preprocess_gray_replicated_and_resized():
    img = Image.new("L", (10, 20), color=128)
    t = preprocess_image(img, 32, torch.float64)
    assert t.shape == (3, 32, 32)
    v = 128 / 255
    assert t[0, 0, 0].item() == pytest.approx((v - 0.485) / 0.229)
    assert t[2, 5, 5].item() == pytest.approx((v - 0.406) / 0.225)


def test_resize_map_constant():
    m = torch.full((2, 4, 4), 3.0)
    out = resize_map(m, (8, 8))
    assert out.shape == (2, 8, 8) and torch.allclose(out, torch.full((2, 8, 8), 3.0))
