use crate::dataio::{CellImage, ChannelKind};
use crate::error::{Error, Result};

/// Splits an 8-channel image into its 5 fluorescent and 3 brightfield
/// planes, preserving order.
pub fn split_channels(image: &CellImage) -> Result<(CellImage, CellImage)> {
    let k = image.kinds();
    let ok = k.len() == 8
        && k[..5].iter().all(|&c| c == ChannelKind::Fluorescent)
        && k[5..].iter().all(|&c| c == ChannelKind::Brightfield);
    if !ok {
        return Err(Error::InvalidImage(format!(
            "expected 5 fluorescent + 3 brightfield channels, got {k:?}"
        )));
    }
    Ok((image.select_channels(0..5), image.select_channels(5..8)))
}
