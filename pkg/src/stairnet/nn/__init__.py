from .checkpoint import load_checkpoint, save_checkpoint
from .data import BatchStream, DataError, Dataset, load_cifar10, load_raw, make_synthetic
from .layers import BatchNorm2d, Conv2d, GlobalAvgPool, Linear, ReLU, StateError
from .losses import cross_entropy, error_rate, softmax
from .network import GroupSpec, NetworkSpec, ResNet
from .optim import SGD, StepSchedule, sgd_step
from .train import DivergenceError, TrainConfig, evaluate, train
