import hashlib

import torch
from torch import nn

from multires_fer.augment import AugmentConfig, ResolutionPolicy, eval_transform
from multires_fer.dataset import load_sample
from multires_fer.engine import TrainConfig
from multires_fer.model import ModelConfig

SMALL_AUGMENT = AugmentConfig(resize_shorter_side=72, crop_size=64,
                              resolution_policy=ResolutionPolicy(0.5, 8, 72))


def small_config(**kw):
    base = dict(epochs=1, batch_size=8, learning_rate=1e-3, augment=SMALL_AUGMENT,
                model=ModelConfig(depth="resnet-small"), seed=0)
    base.update(kw)
    return TrainConfig(**base)


class ConstantModel(nn.Module):
    def __init__(self, label, k=7):
        super().__init__()
        self.label, self.k = label, k

    def forward(self, x):
        out = torch.zeros(x.shape[0], self.k)
        out[:, self.label] = 1.0
        return out


class OracleModel(nn.Module):
    """Perfect predictor: looks each eval-transformed input up by content hash."""

    def __init__(self, index, augment, k=7):
        super().__init__()
        self.k = k
        self.table = {}
        for i in range(len(index)):
            image, label = load_sample(index, i)
            x = torch.from_numpy(eval_transform(image, augment).transpose(2, 0, 1).copy())
            self.table[self._key(x)] = label

    @staticmethod
    def _key(x):
        return hashlib.sha1(x.numpy().tobytes()).hexdigest()

    def forward(self, x):
        out = torch.zeros(x.shape[0], self.k)
        for i in range(x.shape[0]):
            out[i, self.table[self._key(x[i])]] = 1.0
        return out
