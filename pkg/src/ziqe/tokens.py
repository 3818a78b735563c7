from dataclasses import dataclass


@dataclass(frozen=True)
class SpecialTokens:
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2
    mask_id: int = 3

    def validate(self, vocab_size: int) -> None:
        ids = (self.pad_id, self.bos_id, self.eos_id, self.mask_id)
        if len(set(ids)) != 4:
            raise ValueError("special token ids must be pairwise distinct")
        if max(ids) >= vocab_size or min(ids) < 0:
            raise ValueError(f"special token ids must lie in [0, {vocab_size})")

    @property
    def first_content_id(self) -> int:
        return max(self.pad_id, self.bos_id, self.eos_id, self.mask_id) + 1

    def is_special(self, token: int) -> bool:
        return token in (self.pad_id, self.bos_id, self.eos_id, self.mask_id)


SPECIALS = SpecialTokens()
