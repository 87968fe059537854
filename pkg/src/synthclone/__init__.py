"""Clone a bowed-string physical model with a conditional adversarial
autoencoder and drive a real-time overlap-add synthesizer from the result.

Subpackages:
    waveguide   -- digital waveguide bowed-string model (training data source)
    dataset     -- cycle extraction, alignment, normalization, persistence
    neural      -- single-hidden-layer networks, manual backprop, Adam, losses
    experiments -- training loop, experiment conditions, evaluation metrics
    synth       -- overlap-add wavetable synthesis from a trained decoder
    service     -- command-line entry points and the WebSocket control server
"""

__version__ = "0.1.0"
