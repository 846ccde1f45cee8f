# SPDX-License-Identifier: Apache-2.0
"""Reference backbone outputs computed with PyTorch/torchvision.

For each backbone family this builds a seeded float64 model, randomizes the
batch-norm statistics and attention bias tables so that every parameter
matters, converts the weights to the msiqa tensor-file layout and records the
four stage outputs for a fixed input. The C++ tests load the resulting file
and compare their own forward pass against it.

    python3 tools/torch_reference.py --out tests/data             # toy fixtures
    python3 tools/torch_reference.py --out /tmp/ref --full        # ResNet-50 + Swin-T

Each output file holds the backbone weights under their msiqa names plus
`reference.input` and `reference.stage{1..4}`.
"""

import argparse
import pathlib

import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.torch import save_file
from torchvision.models import resnet50
from torchvision.models.swin_transformer import SwinTransformer

IMAGENET_MEAN = [0.485, 0.456, 0.406]
IMAGENET_STD = [0.229, 0.224, 0.225]


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class ToyResidual(nn.Module):
    """One basic block per stage behind a 3x3 stride-2 stem and a max pool."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(3, channels[0], 3, 2, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(channels[0])
        cin = channels[0]
        for i, c in enumerate(channels):
            setattr(self, f"layer{i + 1}", nn.Sequential(BasicBlock(cin, c, 1 if i == 0 else 2)))
            cin = c

    def stages(self, x):
        x = F.max_pool2d(F.relu(self.bn1(self.conv1(x))), 3, 2, 1)
        out = []
        for i in range(4):
            x = getattr(self, f"layer{i + 1}")(x)
            out.append(x)
        return out


def resnet50_stages(model, x):
    x = model.maxpool(model.relu(model.bn1(model.conv1(x))))
    out = []
    for layer in (model.layer1, model.layer2, model.layer3, model.layer4):
        x = layer(x)
        out.append(x)
    return out


def swin_stages(model, x):
    out = []
    for i, layer in enumerate(model.features):
        x = layer(x)
        if i % 2 == 1:
            out.append(x.permute(0, 3, 1, 2).contiguous())
    return out


def randomize(model, generator):
    with torch.no_grad():
        for name, module in model.named_modules():
            if isinstance(module, nn.BatchNorm2d):
                module.weight.uniform_(0.5, 1.5, generator=generator)
                module.bias.normal_(0.0, 0.1, generator=generator)
                module.running_mean.normal_(0.0, 0.1, generator=generator)
                module.running_var.uniform_(0.5, 1.5, generator=generator)
            elif isinstance(module, nn.LayerNorm):
                module.weight.uniform_(0.5, 1.5, generator=generator)
                module.bias.normal_(0.0, 0.1, generator=generator)
            if hasattr(module, "relative_position_bias_table"):
                module.relative_position_bias_table.normal_(0.0, 0.5, generator=generator)


def residual_tensors(model):
    tensors = {}
    for name, value in model.state_dict().items():
        if name.endswith("num_batches_tracked") or name.startswith("fc."):
            continue
        tensors[name] = value
    return tensors


def swin_tensors(model):
    tensors = {}
    for name, value in model.state_dict().items():
        parts = name.split(".")
        if parts[0] != "features" or name.endswith("relative_position_index"):
            continue
        index = int(parts[1])
        rest = parts[2:]
        if index == 0:
            target = {"0": "patch_embed.proj", "2": "patch_embed.norm"}[rest[0]] + "." + rest[-1]
        elif index % 2 == 1:
            stage = (index - 1) // 2
            block, tail = rest[0], ".".join(rest[1:])
            tail = tail.replace("mlp.0.", "mlp.fc1.").replace("mlp.3.", "mlp.fc2.")
            target = f"layers.{stage}.blocks.{block}.{tail}"
        else:
            stage = (index - 2) // 2
            target = f"layers.{stage}.downsample.{'.'.join(rest)}"
        tensors[target] = value
    return tensors


def write(path, kind, tensors, mean, std, image, stages):
    tensors = {k: v.detach().to(torch.float64).contiguous() for k, v in tensors.items()}
    tensors["input_mean"] = torch.tensor(mean, dtype=torch.float64)
    tensors["input_std"] = torch.tensor(std, dtype=torch.float64)
    tensors["reference.input"] = image.contiguous()
    for i, s in enumerate(stages):
        tensors[f"reference.stage{i + 1}"] = s.detach().contiguous()
    save_file(tensors, str(path), metadata={"backbone_kind": kind, "format": "msiqa-reference-v1"})
    print(f"{path}: {len(tensors)} tensors, stage shapes {[tuple(s.shape) for s in stages]}")


def run(kind, model, stage_fn, tensor_fn, mean, std, image, path, generator):
    randomize(model, generator)
    model = model.double().eval()
    normalized = (image - torch.tensor(mean, dtype=torch.float64).view(1, 3, 1, 1)) / torch.tensor(
        std, dtype=torch.float64
    ).view(1, 3, 1, 1)
    with torch.no_grad():
        stages = stage_fn(model, normalized)
    write(path, kind, tensor_fn(model), mean, std, image, stages)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=pathlib.Path, required=True)
    parser.add_argument("--full", action="store_true", help="ResNet-50 and Swin-T at 224x224")
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(args.seed)
    generator = torch.Generator().manual_seed(args.seed)

    if args.full:
        image = torch.rand(1, 3, 224, 224, generator=generator, dtype=torch.float64)
        run("residual50", resnet50(weights=None), resnet50_stages, residual_tensors, IMAGENET_MEAN, IMAGENET_STD,
            image, args.out / "residual50_reference.safetensors", generator)
        swin = SwinTransformer([4, 4], 96, [2, 2, 6, 2], [3, 6, 12, 24], [7, 7], stochastic_depth_prob=0.0)
        run("windowed_tiny", swin, swin_stages, swin_tensors, IMAGENET_MEAN, IMAGENET_STD, image,
            args.out / "windowed_tiny_reference.safetensors", generator)
        return

    # 96x96 gives stage grids 24/12/6/3: the last two need window padding and
    # the first two exercise the shifted-window mask.
    image = torch.rand(2, 3, 96, 96, generator=generator, dtype=torch.float64)
    run("toy_residual", ToyResidual([8, 16, 32, 64]), lambda m, x: m.stages(x), residual_tensors,
        [0.5, 0.4, 0.3], [0.25, 0.2, 0.3], image, args.out / "toy_residual_reference.safetensors", generator)
    swin = SwinTransformer([4, 4], 4, [2, 2, 2, 2], [1, 2, 2, 4], [4, 4], stochastic_depth_prob=0.0)
    run("toy_windowed", swin, swin_stages, swin_tensors, [0.5, 0.4, 0.3], [0.25, 0.2, 0.3], image,
        args.out / "toy_windowed_reference.safetensors", generator)


if __name__ == "__main__":
    main()
