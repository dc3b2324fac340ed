"""Text-aware dual routing VQA: OCR-aware fusion, a candidate classifier, an
OCR pointer decoder, and a learned gate choosing between them."""

__version__ = "0.1.0"
