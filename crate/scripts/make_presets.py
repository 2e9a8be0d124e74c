"""Writes the network presets under presets/.

mnist_conv3, mnist_dropout and cifar_conv are trainable specs. squeezenet1_1
and resnet18 are shape-only: every layer carries its true input shape, so the
memory audit sees the reference feature-map sizes even where a layer (strided
pooling, branches, skip connections) is not expressible as a plain chain.
"""

import json
import pathlib

OUT = pathlib.Path(__file__).resolve().parent.parent / "presets"


def dims(c, h, w):
    return {"channels": c, "height": h, "width": w}


def conv(k, cin, cout, stride=1, bias=True):
    d = {"type": "conv", "kernel": k, "c_in": cin, "c_out": cout, "bias": bias}
    if stride != 1:
        d["stride"] = stride
    return d


def trainable():
    conv3 = [
        conv(3, 1, 16), {"type": "relu"}, {"type": "maxpool", "size": 2},
        conv(3, 16, 32), {"type": "relu"}, {"type": "maxpool", "size": 2},
        conv(3, 32, 32), {"type": "relu"}, {"type": "maxpool", "size": 2},
        {"type": "flatten"}, {"type": "dense", "in": 288, "out": 10, "bias": True},
    ]
    dropout = [
        conv(3, 1, 32), {"type": "relu"},
        conv(3, 32, 64), {"type": "relu"},
        {"type": "maxpool", "size": 2}, {"type": "dropout", "p": 0.25},
        {"type": "flatten"}, {"type": "dense", "in": 12544, "out": 128, "bias": True},
        {"type": "relu"}, {"type": "dropout", "p": 0.5},
        {"type": "dense", "in": 128, "out": 10, "bias": True}, {"type": "log_softmax"},
    ]
    cifar = [
        conv(5, 3, 16), {"type": "relu"},
        conv(5, 16, 32), {"type": "relu"}, {"type": "avgpool", "size": 2},
        conv(5, 32, 32), {"type": "relu"},
        conv(5, 32, 32), {"type": "relu"}, {"type": "avgpool", "size": 2},
        {"type": "flatten"}, {"type": "dense", "in": 2048, "out": 10, "bias": True},
        {"type": "log_softmax"},
    ]
    return [
        ("mnist_conv3", dims(1, 28, 28), conv3),
        ("mnist_dropout", dims(1, 28, 28), dropout),
        ("cifar_conv", dims(3, 32, 32), cifar),
    ]


def pinned(layer, c, h, w):
    layer = dict(layer)
    layer["input"] = dims(c, h, w)
    return layer


def squeezenet():
    L = [pinned(conv(3, 3, 64, 2), 3, 224, 224), pinned({"type": "relu"}, 64, 111, 111),
         pinned({"type": "maxpool", "size": 2}, 64, 111, 111)]
    side = 55

    def fire(cin, s, e):
        return [
            pinned(conv(1, cin, s), cin, side, side), pinned({"type": "relu"}, s, side, side),
            pinned(conv(1, s, e), s, side, side), pinned({"type": "relu"}, e, side, side),
            pinned(conv(3, s, e), s, side, side), pinned({"type": "relu"}, e, side, side),
        ]

    L += fire(64, 16, 64) + fire(128, 16, 64)
    L.append(pinned({"type": "maxpool", "size": 2}, 128, 55, 55))
    side = 27
    L += fire(128, 32, 128) + fire(256, 32, 128)
    L.append(pinned({"type": "maxpool", "size": 2}, 256, 27, 27))
    side = 13
    L += fire(256, 48, 192) + fire(384, 48, 192) + fire(384, 64, 256) + fire(512, 64, 256)
    L += [pinned({"type": "dropout", "p": 0.5}, 512, 13, 13), pinned(conv(1, 512, 1000), 512, 13, 13),
          pinned({"type": "relu"}, 1000, 13, 13), pinned({"type": "avgpool", "size": 13}, 1000, 13, 13),
          {"type": "flatten"}]
    return ("squeezenet1_1", dims(3, 224, 224), L)


def resnet18():
    L = [pinned(conv(7, 3, 64, 2, False), 3, 224, 224), pinned({"type": "relu"}, 64, 112, 112),
         pinned({"type": "maxpool", "size": 2}, 64, 112, 112)]
    c, side = 64, 56
    for cout, first_stride in [(64, 1), (128, 2), (256, 2), (512, 2)]:
        for block in range(2):
            stride = first_stride if block == 0 else 1
            out_side = side // stride
            L.append(pinned(conv(3, c, cout, stride, False), c, side, side))
            L.append(pinned({"type": "relu"}, cout, out_side, out_side))
            L.append(pinned(conv(3, cout, cout, 1, False), cout, out_side, out_side))
            if stride != 1 or c != cout:
                L.append(pinned(conv(1, c, cout, stride, False), c, side, side))
            L.append(pinned({"type": "relu"}, cout, out_side, out_side))
            c, side = cout, out_side
    L += [pinned({"type": "avgpool", "size": 7}, 512, 7, 7), {"type": "flatten"},
          {"type": "dense", "in": 512, "out": 1000, "bias": True}]
    return ("resnet18", dims(3, 224, 224), L)


def main():
    OUT.mkdir(exist_ok=True)
    for name, inp, layers in trainable():
        spec = {"name": name, "input": inp, "layers": layers}
        (OUT / f"{name}.json").write_text(json.dumps(spec, indent=2) + "\n")
    for name, inp, layers in (squeezenet(), resnet18()):
        spec = {"name": name, "input": inp, "shape_only": True, "layers": layers}
        (OUT / f"{name}.json").write_text(json.dumps(spec, indent=2) + "\n")


if __name__ == "__main__":
    main()
