"""annocascade: train a small CNN encoder plus LSTM/GRU decoders on
image/annotation pairs, then refine the label space by clustering joint
image/text context vectors and training a second round."""

__version__ = "0.1.0"
