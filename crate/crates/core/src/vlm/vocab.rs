//! Reserved token ids. Content tokens start at [`FIRST_CONTENT`].

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const MASK: TokenId = 3;

pub const SPECIALS: [TokenId; 4] = [PAD, BOS, EOS, MASK];
pub const FIRST_CONTENT: TokenId = 4;

pub fn is_special(t: TokenId) -> bool {
    SPECIALS.contains(&t)
}
