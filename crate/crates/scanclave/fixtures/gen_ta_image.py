#!/usr/bin/env python3
"""Regenerates ta_image.bin, the fixture target application.

The image is a 4096-byte static x86-64 ELF consisting of one page-aligned
RX PT_LOAD segment that covers the whole file, so the very same bytes serve
as:

  - a child executable (entry point parks in a pause-syscall loop),
  - a plugin image loaded into the agent's own address space, and
  - snapshot region content,

and all three modes measure identical digests. Bytes after the code are a
fixed LCG pattern so any single-byte change is distinguishable content.

Output is deterministic; run from this directory:  python3 gen_ta_image.py
"""

import struct

PAGE = 4096
VADDR = 0x400000
CODE_OFF = 0x78  # ehdr (64) + one phdr (56)

# x86-64: pause-syscall loop; never falls through into the filler bytes.
#   b8 22 00 00 00    mov eax, 34 (SYS_pause)
#   0f 05             syscall
#   eb f7             jmp  -9
CODE = bytes([0xB8, 0x22, 0x00, 0x00, 0x00, 0x0F, 0x05, 0xEB, 0xF7])


def build() -> bytes:
    ehdr = b"\x7fELF" + bytes([2, 1, 1, 0]) + b"\x00" * 8
    ehdr += struct.pack(
        "<HHIQQQIHHHHHH",
        2,                  # e_type = ET_EXEC
        0x3E,               # e_machine = EM_X86_64
        1,                  # e_version
        VADDR + CODE_OFF,   # e_entry
        64,                 # e_phoff
        0,                  # e_shoff
        0,                  # e_flags
        64,                 # e_ehsize
        56,                 # e_phentsize
        1,                  # e_phnum
        0, 0, 0,            # e_shentsize, e_shnum, e_shstrndx
    )
    phdr = struct.pack(
        "<IIQQQQQQ",
        1,        # p_type = PT_LOAD
        5,        # p_flags = R + X
        0,        # p_offset
        VADDR,    # p_vaddr
        VADDR,    # p_paddr
        PAGE,     # p_filesz
        PAGE,     # p_memsz
        0x1000,   # p_align
    )
    img = bytearray(ehdr + phdr + CODE)
    x = 0x5C
    while len(img) < PAGE:
        x = (x * 167 + 13) % 251
        img.append(x)
    assert len(img) == PAGE
    return bytes(img)


if __name__ == "__main__":
    import os

    out = os.path.join(os.path.dirname(__file__) or ".", "ta_image.bin")
    with open(out, "wb") as f:
        f.write(build())
    os.chmod(out, 0o755)
    print(f"wrote {out}")
