"""cider: joint breath/cough audio classification pipeline.

A self-contained library + CLI for binary classification of paired
breath/cough recordings: WAV decoding, log-spectrogram extraction, a
nine-convolution residual network trained with weighted BCE under a
stratified 2/1/1 fold protocol, majority-vote inference, an SVM+PCA
reference pipeline, and the associated metric/statistics stack.
"""

__version__ = "0.1.0"
