"""Image difference captioning: adapt a paired-image encoder, then fine-tune a captioner."""
