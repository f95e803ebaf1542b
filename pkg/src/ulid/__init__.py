"""End-to-end language identification: Fbank front end, residual CNN, TAP/GRU/LSTM/LDE encoders."""

__version__ = "0.1.0"
