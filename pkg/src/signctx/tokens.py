"""Reserved token ids shared by the tokenizer and the model."""

PAD, BOS, EOS, UNK, SEP = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>", "<sep>")
