use std::collections::BTreeSet;

use super::set_bit;

/// `x` with its sensitive bits (in index order) overwritten by the donor's
/// bit values.
pub fn bitshare_compose(x: &[u8], sbits: &BTreeSet<u32>, donor: &[bool]) -> Vec<u8> {
    let mut out = x.to_vec();
    if let Some(&last) = sbits.iter().next_back() {
        let need = (last / 8 + 1) as usize;
        if out.len() < need {
            out.resize(need, 0);
        }
    }
    for (&s, &b) in sbits.iter().zip(donor) {
        set_bit(&mut out, s, b);
    }
    out
}
