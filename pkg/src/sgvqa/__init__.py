"""Scene-graph visual question answering: symbolic programs executed over scene graphs,
with a cross-modality encoder that follows the executor's object selections."""

__version__ = "0.1.0"
