"""Multi-head convolutional classifiers and the plain SGD update.

Every model is a shared backbone followed by one linear head per task.
Inputs at the module boundary are channels-last numpy arrays; they are
moved to NCHW tensors inside :func:`as_tensor`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

ARCHITECTURES = ("small-cnn", "reduced-resnet18")


class DivergenceError(RuntimeError):
    """Raised when a training loss is not finite."""


# --------------------------------------------------------------------------
# backbones


class SmallCNN(nn.Module):
    """Three conv blocks; the third keeps spatial resolution for Grad-CAM.

    Inputs in [0, 1] are shifted to zero mean before the first conv.
    """

    def __init__(self, in_channels: int = 3, width: int = 32, input_shift: float = 0.5):
        super().__init__()
        self.input_shift = input_shift
        self.block1 = nn.Sequential(nn.Conv2d(in_channels, width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2))
        self.block2 = nn.Sequential(nn.Conv2d(width, 2 * width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2))
        self.block3 = nn.Sequential(nn.Conv2d(2 * width, 2 * width, 3, padding=1), nn.ReLU())
        self.out_features = 2 * width

    def forward(self, x):
        x = self.block3(self.block2(self.block1(x - self.input_shift)))
        return F.adaptive_avg_pool2d(x, 1).flatten(1)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False), nn.BatchNorm2d(planes)
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ReducedResNet18(nn.Module):
    """ResNet18 with 20 base feature maps instead of 64."""

    def __init__(self, in_channels: int = 3, nf: int = 20):
        super().__init__()
        self.in_planes = nf
        self.conv1 = nn.Conv2d(in_channels, nf, 3, stride=1, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(nf)
        self.layer1 = self._make_layer(nf, 2, 1)
        self.layer2 = self._make_layer(2 * nf, 2, 2)
        self.layer3 = self._make_layer(4 * nf, 2, 2)
        self.layer4 = self._make_layer(8 * nf, 2, 2)
        self.out_features = 8 * nf

    def _make_layer(self, planes, blocks, stride):
        layers = []
        for s in [stride] + [1] * (blocks - 1):
            layers.append(BasicBlock(self.in_planes, planes, s))
            self.in_planes = planes
        return nn.Sequential(*layers)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.layer4(self.layer3(self.layer2(self.layer1(out))))
        return F.adaptive_avg_pool2d(out, 1).flatten(1)


INITS = ("default", "kaiming")


def kaiming_init(module: nn.Module) -> None:
    """He-normal conv weights (fan-in, ReLU gain) and zero conv biases."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


_DEFAULT_TARGET = {"small-cnn": "block3", "reduced-resnet18": "layer4.1.shortcut"}


class MultiHeadModel(nn.Module):
    def __init__(self, arch: str, backbone: nn.Module, label_sets: Sequence[Sequence[int]],
                 input_shape: tuple, target_layer: Optional[str] = None):
        super().__init__()
        widths = {len(ls) for ls in label_sets}
        if len(widths) != 1:
            raise ValueError("all heads must have the same number of classes")
        self.arch = arch
        self.backbone = backbone
        self.label_sets = [tuple(int(c) for c in ls) for ls in label_sets]
        self.classes_per_task = widths.pop()
        self.input_shape = tuple(input_shape)
        self.heads = nn.ModuleList(nn.Linear(backbone.out_features, self.classes_per_task)
                                   for _ in self.label_sets)
        self.target_layer = target_layer or _DEFAULT_TARGET[arch]
        self._local = {}
        for t, ls in enumerate(self.label_sets):
            for j, c in enumerate(ls):
                self._local[(t, c)] = j
        self.target_module  # fail fast on an unknown layer name

    @property
    def n_tasks(self) -> int:
        return len(self.heads)

    @property
    def target_module(self) -> nn.Module:
        modules = dict(self.backbone.named_modules())
        if self.target_layer not in modules:
            raise ValueError(f"unknown target layer {self.target_layer!r}")
        return modules[self.target_layer]

    def local_targets(self, labels, task_ids) -> torch.Tensor:
        try:
            idx = [self._local[(int(t), int(c))] for c, t in zip(labels, task_ids)]
        except KeyError as exc:
            raise ValueError(f"label/task pair {exc.args[0]} not in the head map") from None
        return torch.tensor(idx, dtype=torch.long)

    def forward(self, x: torch.Tensor, task_ids) -> torch.Tensor:
        task_ids = torch.as_tensor(task_ids, dtype=torch.long)
        if task_ids.ndim == 0:
            task_ids = task_ids.expand(x.shape[0])
        feats = self.backbone(x)
        out = feats.new_empty((x.shape[0], self.classes_per_task))
        for t in torch.unique(task_ids).tolist():
            if not 0 <= t < self.n_tasks:
                raise ValueError(f"no head for task {t}")
            mask = task_ids == t
            out[mask] = self.heads[t](feats[mask])
        return out

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(arch: str, n_tasks: int = None, classes_per_task: int = None, seed: int = 0, *,
                label_sets=None, input_shape=(32, 32, 3), target_layer=None, init: str = "default") -> MultiHeadModel:
    """Deterministically initialised multi-head model.

    ``label_sets`` gives the global class ids of every head; when omitted,
    heads cover contiguous blocks of ``classes_per_task`` ids.
    """
    if arch not in ARCHITECTURES:
        raise ValueError(f"unsupported architecture {arch!r}; choose from {ARCHITECTURES}")
    if init not in INITS:
        raise ValueError(f"unknown init {init!r}; choose from {INITS}")
    if label_sets is None:
        label_sets = [range(t * classes_per_task, (t + 1) * classes_per_task) for t in range(n_tasks)]
    h, w, c = input_shape
    if arch == "reduced-resnet18" and min(h, w) < 16:
        raise ValueError("reduced-resnet18 needs inputs of at least 16x16")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        backbone = SmallCNN(c) if arch == "small-cnn" else ReducedResNet18(c)
        if init == "kaiming":
            kaiming_init(backbone)
        model = MultiHeadModel(arch, backbone, label_sets, input_shape, target_layer)
    return model


def model_for_stream(arch: str, stream, seed: int, tasks=None, target_layer=None,
                     init: str = "default") -> MultiHeadModel:
    tasks = stream.eval_tasks if tasks is None else tasks
    meta = stream.meta
    model = build_model(arch, seed=seed, label_sets=[t.label_set for t in tasks],
                        input_shape=(meta.height, meta.width, meta.channels), target_layer=target_layer,
                        init=init)
    # heads are indexed by position in ``tasks``; remember the stream ids
    model.task_index = {t.task_id: i for i, t in enumerate(tasks)}
    return model


# --------------------------------------------------------------------------
# forward / update


def as_tensor(images, model: MultiHeadModel) -> torch.Tensor:
    ref = next(model.parameters())
    x = torch.as_tensor(np.asarray(images), dtype=ref.dtype, device=ref.device)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if tuple(x.shape[1:]) != model.input_shape:
        raise ValueError(f"images of shape {tuple(x.shape[1:])} do not match model input {model.input_shape}")
    return x.permute(0, 3, 1, 2).contiguous()


def head_ids(model: MultiHeadModel, task_ids) -> np.ndarray:
    index = getattr(model, "task_index", None)
    task_ids = np.array(np.atleast_1d(task_ids), dtype=np.int64)
    if index is None:
        return task_ids
    try:
        return np.array([index[int(t)] for t in task_ids], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"no head for task {exc.args[0]}") from None


def forward(model: MultiHeadModel, images, task_id) -> np.ndarray:
    """Pre-softmax scores, one row per image, for the head of ``task_id``."""
    x = as_tensor(images, model)
    heads = head_ids(model, np.broadcast_to(np.asarray(task_id), (x.shape[0],)))
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(x, torch.from_numpy(heads).to(x.device))
    model.train(was_training)
    return out.cpu().numpy()


def sgd_step(model: MultiHeadModel, images, labels, task_ids, lr: float) -> float:
    """One plain SGD step on the mean cross-entropy of a (possibly mixed-task) batch."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if len(labels) == 0:
        raise ValueError("empty batch")
    heads = head_ids(model, task_ids)
    x = as_tensor(images, model)
    targets = model.local_targets(labels, heads).to(x.device)
    model.train()
    model.zero_grad(set_to_none=True)
    loss = F.cross_entropy(model(x, torch.from_numpy(heads).to(x.device)), targets)
    value = float(loss.item())
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss {value} at lr={lr}")
    loss.backward()
    with torch.no_grad():
        for p in model.parameters():
            if p.grad is not None:
                p.add_(p.grad, alpha=-lr)
    model.zero_grad(set_to_none=True)
    return value


def evaluate(model: MultiHeadModel, task, batch_size: int = 500) -> float:
    """Test accuracy of ``model`` on one task using that task's head."""
    correct = 0
    for start in range(0, len(task.test_labels), batch_size):
        images = task.test_images[start : start + batch_size]
        labels = task.test_labels[start : start + batch_size]
        scores = forward(model, images, task.task_id)
        head = model.label_sets[head_ids(model, [task.task_id])[0]]
        pred = np.asarray(head)[scores.argmax(axis=1)]
        correct += int((pred == labels).sum())
    return correct / len(task.test_labels)


@dataclass
class TargetCapture:
    activations: np.ndarray
    gradients: np.ndarray


def capture_target_layer(model: MultiHeadModel, image, class_id: int, task_id: int) -> TargetCapture:
    """Target-layer activations and d(score of ``class_id``)/d(activations).

    Runs in eval mode; parameters and their ``.grad`` fields are untouched.
    """
    head = int(head_ids(model, [task_id])[0])
    label_set = model.label_sets[head]
    if class_id not in label_set:
        raise ValueError(f"class {class_id} is not in the head of task {task_id}: {label_set}")
    x = as_tensor(image, model)
    if x.shape[0] != 1:
        raise ValueError("capture_target_layer takes a single image")
    store = {}

    def hook(_module, _inputs, output):
        store["act"] = output

    handle = model.target_module.register_forward_hook(hook)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            scores = model(x, torch.tensor([head], device=x.device))
            score = scores[0, label_set.index(class_id)]
            (grad,) = torch.autograd.grad(score, store["act"])
    finally:
        handle.remove()
        model.train(was_training)
    return TargetCapture(store["act"][0].detach().cpu().numpy().copy(), grad[0].detach().cpu().numpy().copy())


def predict_topk(model: MultiHeadModel, image, task_id: int, k: int) -> list:
    """Class ids sorted by descending score, ties broken by ascending id."""
    head = model.label_sets[head_ids(model, [task_id])[0]]
    if not 1 <= k <= len(head):
        raise ValueError(f"k must be in [1, {len(head)}], got {k}")
    scores = forward(model, image, task_id)[0]
    ids = np.asarray(head)
    order = np.lexsort((ids, -scores))
    return [int(c) for c in ids[order[:k]]]


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: MultiHeadModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "arch": model.arch,
            "label_sets": [list(ls) for ls in model.label_sets],
            "input_shape": list(model.input_shape),
            "target_layer": model.target_layer,
            "task_index": getattr(model, "task_index", None),
            "state_dict": model.state_dict(),
        },
        path,
    )
    return path


def load_checkpoint(path) -> MultiHeadModel:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    model = build_model(blob["arch"], label_sets=blob["label_sets"], input_shape=tuple(blob["input_shape"]),
                        target_layer=blob["target_layer"])
    model.load_state_dict(blob["state_dict"])
    if blob["task_index"] is not None:
        model.task_index = {int(k): int(v) for k, v in blob["task_index"].items()}
    return model
