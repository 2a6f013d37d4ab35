"""Export torchvision ResNet34 residual stages to an archive `bfx` can read.

    python3 tools/export_resnet34.py weights/resnet34_encoder.pt

Only layer1..layer4 are written; the network stem is not used.
"""

import argparse

import torch
import torchvision


class Stages(torch.nn.Module):
    def __init__(self, net):
        super().__init__()
        self.layer1 = net.layer1
        self.layer2 = net.layer2
        self.layer3 = net.layer3
        self.layer4 = net.layer4

    def forward(self, x):
        return self.layer4(self.layer3(self.layer2(self.layer1(x))))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out", help="output archive path")
    args = parser.parse_args()

    net = torchvision.models.resnet34(weights=torchvision.models.ResNet34_Weights.IMAGENET1K_V1)
    torch.jit.script(Stages(net).eval()).save(args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
