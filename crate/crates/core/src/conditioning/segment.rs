use super::ConditioningError;
use crate::raster::{Image, Mask, WHITE};

/// White-background reference: subject pixels kept, everything else white,
/// cropped to the mask's bounding box and centred on a canvas of the input size.
pub fn segment_subject(img: &Image, mask: &Mask) -> Result<Image, ConditioningError> {
    Ok(segment_subject_with_mask(img, mask)?.0)
}

/// [`segment_subject`] plus the subject mask in the output frame.
pub fn segment_subject_with_mask(
    img: &Image,
    mask: &Mask,
) -> Result<(Image, Mask), ConditioningError> {
    if (mask.h, mask.w) != (img.h, img.w) {
        return Err(ConditioningError::Shape(format!(
            "mask {}x{} for image {}x{}",
            mask.h, mask.w, img.h, img.w
        )));
    }
    let (y0, x0, y1, x1) = mask.bbox().ok_or(ConditioningError::EmptyMask)?;
    let (bh, bw) = (y1 - y0, x1 - x0);
    let (top, left) = ((img.h - bh) / 2, (img.w - bw) / 2);
    let mut out = Image::filled(img.h, img.w, WHITE);
    let mut out_mask = Mask::new(img.h, img.w);
    for y in 0..bh {
        for x in 0..bw {
            if mask.get(y0 + y, x0 + x) {
                out.set(top + y, left + x, img.get(y0 + y, x0 + x));
                out_mask.set(top + y, left + x, true);
            }
        }
    }
    Ok((out, out_mask))
}
