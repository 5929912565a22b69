"""Tiny configurations shared by the training-level tests."""
from ppnet.config import DataConfig, TrainConfig
from ppnet.data import gen_moving_shapes
from ppnet.loss import LossConfig
from ppnet.network import PPNetConfig


def tiny_config(**flat) -> TrainConfig:
    net = PPNetConfig(num_layers=2, channels=[2, 3], input_size=(16, 16))
    cfg = TrainConfig(net=net, loss=LossConfig(), data=DataConfig(count=6, seq_len=4, heldout=2, shape_min=3,
                                                                   shape_max=6),
                      epochs=2, learning_rate=1e-2, batch_size=2)
    return cfg.replace(**flat) if flat else cfg


def tiny_data(seed=0, count=6, T=4):
    return gen_moving_shapes(seed, count, T, (16, 16), shape_size=(3, 6))
