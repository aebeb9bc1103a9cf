//! Datacubes, PAN images, the RPNC container and radiometric normalization.
//!
//! RPNC layout (all little-endian):
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `"RPNC"` |
//! | 4 | 4 | version (`u32`, currently 1) |
//! | 8 | 4 | width `W` (`u32`) |
//! | 12 | 4 | height `H` (`u32`) |
//! | 16 | 4 | band count `B` (`u32`) |
//! | 20 | 4 | resolution ratio `R` (`u32`) |
//! | 24 | 8 | scale (`f64`); physical value = stored value × scale |
//! | 32 | 32 | reserved, zero |
//! | 64 | 4·B | wavelengths in nm (`f32`) |
//! | 64 + 4·B | 4·B·H·W | samples (`f32`), band-sequential, row-major |
//!
//! A PAN image is stored as a one-band file with wavelength 0.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"RPNC";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 64;

/// Normalized values above this trigger a warning.
const SOFT_UPPER_BOUND: f64 = 1.5;

/// Percentile used to derive the normalization scale.
pub const NORMALIZATION_PERCENTILE: f64 = 99.9;

/// A hyperspectral cube with bands in ascending wavelength order.
#[derive(Clone, Debug, PartialEq)]
pub struct DataCube {
    bands: Tensor,
    wavelengths: Vec<f64>,
    ratio: usize,
    scale: f64,
    /// `permutation[i]` is the on-disk index of in-memory band `i`.
    permutation: Vec<usize>,
}

impl DataCube {
    /// Wraps `bands` (B × H × W); wavelengths must already be strictly increasing.
    pub fn new(bands: Tensor, wavelengths: Vec<f64>, ratio: usize) -> Result<Self> {
        if wavelengths.len() != bands.channels() {
            return Err(Error::shape(
                "DataCube wavelengths",
                bands.channels(),
                wavelengths.len(),
            ));
        }
        if bands.is_empty() {
            return Err(Error::InvalidArgument("datacube has no samples".into()));
        }
        if ratio == 0 {
            return Err(Error::InvalidArgument("resolution ratio must be positive".into()));
        }
        if let Some(w) = wavelengths.windows(2).find(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument(format!(
                "wavelengths must be strictly increasing, found {} then {}",
                w[0], w[1]
            )));
        }
        if let Some(w) = wavelengths.iter().find(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite wavelength {w}")));
        }
        let permutation = (0..bands.channels()).collect();
        Ok(DataCube {
            bands,
            wavelengths,
            ratio,
            scale: 1.0,
            permutation,
        })
    }

    /// Sorts bands by wavelength, remembering where each came from.
    /// Duplicate wavelengths are rejected.
    pub fn from_unsorted(bands: Tensor, wavelengths: Vec<f64>, ratio: usize) -> Result<Self> {
        if wavelengths.len() != bands.channels() {
            return Err(Error::shape(
                "DataCube wavelengths",
                bands.channels(),
                wavelengths.len(),
            ));
        }
        let mut order: Vec<usize> = (0..wavelengths.len()).collect();
        order.sort_by(|&a, &b| wavelengths[a].total_cmp(&wavelengths[b]));
        for pair in order.windows(2) {
            if wavelengths[pair[0]] == wavelengths[pair[1]] {
                return Err(Error::Format(format!(
                    "duplicate wavelength {} nm (bands {} and {})",
                    wavelengths[pair[0]], pair[0], pair[1]
                )));
            }
        }
        let plane = bands.height() * bands.width();
        let mut data = Vec::with_capacity(bands.len());
        for &i in &order {
            data.extend_from_slice(&bands.data()[i * plane..(i + 1) * plane]);
        }
        let sorted = Tensor::from_vec(bands.shape(), data)?;
        let wl = order.iter().map(|&i| wavelengths[i]).collect();
        let mut cube = Self::new(sorted, wl, ratio)?;
        cube.permutation = order;
        Ok(cube)
    }

    pub fn with_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "scale must be positive and finite, got {scale}"
            )));
        }
        self.scale = scale;
        Ok(self)
    }

    pub fn with_ratio(mut self, ratio: usize) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::InvalidArgument("resolution ratio must be positive".into()));
        }
        self.ratio = ratio;
        Ok(self)
    }

    pub fn bands(&self) -> &Tensor {
        &self.bands
    }
    pub fn into_bands(self) -> Tensor {
        self.bands
    }
    pub fn band(&self, b: usize) -> Tensor {
        self.bands.channel(b)
    }
    pub fn band_count(&self) -> usize {
        self.bands.channels()
    }
    pub fn height(&self) -> usize {
        self.bands.height()
    }
    pub fn width(&self) -> usize {
        self.bands.width()
    }
    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }
    pub fn ratio(&self) -> usize {
        self.ratio
    }
    pub fn scale(&self) -> f64 {
        self.scale
    }
    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }
    pub fn is_sorted_on_disk(&self) -> bool {
        self.permutation.iter().enumerate().all(|(i, &p)| i == p)
    }

    /// Same metadata, new band data of possibly different spatial size.
    pub fn with_bands(&self, bands: Tensor) -> Result<Self> {
        if bands.channels() != self.band_count() {
            return Err(Error::shape(
                "DataCube::with_bands",
                self.band_count(),
                bands.channels(),
            ));
        }
        Ok(DataCube {
            bands,
            ..self.clone()
        })
    }

    /// Cube made of the listed bands, which must be in ascending order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let planes: Vec<Tensor> = indices.iter().map(|&i| self.band(i)).collect();
        let refs: Vec<&Tensor> = planes.iter().collect();
        let wl = indices.iter().map(|&i| self.wavelengths[i]).collect();
        let mut out = Self::new(Tensor::concat_channels(&refs)?, wl, self.ratio)?;
        out.scale = self.scale;
        out.permutation = indices.iter().map(|&i| self.permutation[i]).collect();
        Ok(out)
    }
}

/// Panchromatic image; shares the normalization scale of its cube.
#[derive(Clone, Debug, PartialEq)]
pub struct PanImage {
    image: Tensor,
    scale: f64,
}

impl PanImage {
    pub fn new(image: Tensor) -> Result<Self> {
        if image.channels() != 1 {
            return Err(Error::shape("PanImage", "1 channel", image.channels()));
        }
        if image.is_empty() {
            return Err(Error::InvalidArgument("PAN image has no samples".into()));
        }
        Ok(PanImage { image, scale: 1.0 })
    }

    pub fn with_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "scale must be positive and finite, got {scale}"
            )));
        }
        self.scale = scale;
        Ok(self)
    }

    pub fn image(&self) -> &Tensor {
        &self.image
    }
    pub fn into_image(self) -> Tensor {
        self.image
    }
    pub fn height(&self) -> usize {
        self.image.height()
    }
    pub fn width(&self) -> usize {
        self.image.width()
    }
    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// PAN dimensions must be exactly `ratio` times the cube's.
pub fn check_pairing(cube: &DataCube, pan: &PanImage) -> Result<()> {
    let r = cube.ratio();
    if pan.height() != r * cube.height() || pan.width() != r * cube.width() {
        return Err(Error::shape(
            "cube/PAN pairing",
            format!("PAN {}x{}", r * cube.height(), r * cube.width()),
            format!("PAN {}x{}", pan.height(), pan.width()),
        ));
    }
    Ok(())
}

fn u32_field(name: &str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{name} {v} exceeds u32")))
}

fn encode(bands: &Tensor, wavelengths: &[f64], ratio: usize, scale: f64) -> Result<Vec<u8>> {
    let b = bands.channels();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * b + 4 * bands.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&u32_field("width", bands.width())?.to_le_bytes());
    buf.extend_from_slice(&u32_field("height", bands.height())?.to_le_bytes());
    buf.extend_from_slice(&u32_field("band count", b)?.to_le_bytes());
    buf.extend_from_slice(&u32_field("ratio", ratio)?.to_le_bytes());
    buf.extend_from_slice(&scale.to_le_bytes());
    buf.resize(HEADER_LEN, 0);
    for &w in wavelengths {
        buf.extend_from_slice(&(w as f32).to_le_bytes());
    }
    for &v in bands.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(buf)
}

struct Decoded {
    bands: Tensor,
    wavelengths: Vec<f64>,
    ratio: usize,
    scale: f64,
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn f32_values(bytes: &[u8]) -> impl Iterator<Item = f64> + '_ {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"RPNC\"",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported RPNC version {version}")));
    }
    let w = read_u32(bytes, 8) as usize;
    let h = read_u32(bytes, 12) as usize;
    let b = read_u32(bytes, 16) as usize;
    let ratio = read_u32(bytes, 20) as usize;
    let scale = f64::from_le_bytes(bytes[24..32].try_into().expect("8 bytes"));
    if w == 0 || h == 0 || b == 0 {
        return Err(Error::Format(format!(
            "header declares empty dimensions {w}x{h}x{b}"
        )));
    }
    if ratio == 0 {
        return Err(Error::Format("header declares ratio 0".into()));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Format(format!("header scale {scale} is not positive")));
    }
    let expected = HEADER_LEN as u64 + 4 * b as u64 + 4 * (b as u64) * (h as u64) * (w as u64);
    if bytes.len() as u64 != expected {
        return Err(Error::Format(format!(
            "header declares {b} bands of {w}x{h}: expected {expected} bytes, file holds {}",
            bytes.len()
        )));
    }
    let wl_end = HEADER_LEN + 4 * b;
    let wavelengths: Vec<f64> = f32_values(&bytes[HEADER_LEN..wl_end]).collect();
    let data: Vec<f64> = f32_values(&bytes[wl_end..]).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("payload contains non-finite samples".into()));
    }
    Ok(Decoded {
        bands: Tensor::from_vec(Shape::new(b, h, w), data)?,
        wavelengths,
        ratio,
        scale,
    })
}

/// Serializes a cube in memory order (ascending wavelength).
pub fn cube_to_bytes(cube: &DataCube) -> Result<Vec<u8>> {
    encode(cube.bands(), cube.wavelengths(), cube.ratio(), cube.scale())
}

/// Parses a cube; bands are re-sorted by wavelength.
pub fn cube_from_bytes(bytes: &[u8]) -> Result<DataCube> {
    let d = decode(bytes)?;
    let cube = DataCube::from_unsorted(d.bands, d.wavelengths, d.ratio)?.with_scale(d.scale)?;
    if !cube.is_sorted_on_disk() {
        log::info!(
            "bands re-sorted by wavelength, on-disk order {:?}",
            cube.permutation()
        );
    }
    Ok(cube)
}

pub fn pan_to_bytes(pan: &PanImage) -> Result<Vec<u8>> {
    encode(pan.image(), &[0.0], 1, pan.scale())
}

pub fn pan_from_bytes(bytes: &[u8]) -> Result<PanImage> {
    let d = decode(bytes)?;
    if d.bands.channels() != 1 {
        return Err(Error::Format(format!(
            "PAN file must hold one band, found {}",
            d.bands.channels()
        )));
    }
    PanImage::new(d.bands)?.with_scale(d.scale)
}

pub fn write_cube(cube: &DataCube, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, cube_to_bytes(cube)?)?;
    Ok(())
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<DataCube> {
    cube_from_bytes(&std::fs::read(path)?)
}

pub fn write_pan(pan: &PanImage, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, pan_to_bytes(pan)?)?;
    Ok(())
}

pub fn read_pan(path: impl AsRef<Path>) -> Result<PanImage> {
    pan_from_bytes(&std::fs::read(path)?)
}

/// Nearest-rank percentile, `q` in `(0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    // the epsilon absorbs representation error in q (99.9 is not exact)
    let rank = ((q / 100.0) * v.len() as f64 - 1e-9).ceil() as usize;
    let idx = rank.clamp(1, v.len()) - 1;
    let (_, x, _) = v.select_nth_unstable_by(idx, f64::total_cmp);
    *x
}

/// Divides cube and PAN by a common scale derived from high percentiles of
/// both, folding it into their `scale` fields. Returns the scale applied.
pub fn normalize_pair(cube: &DataCube, pan: &PanImage) -> Result<(DataCube, PanImage, f64)> {
    check_pairing(cube, pan)?;
    let s = percentile(cube.bands().data(), NORMALIZATION_PERCENTILE).max(percentile(
        pan.image().data(),
        NORMALIZATION_PERCENTILE,
    ));
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::InvalidArgument(
            "cannot normalize: inputs are zero or non-positive at the reference percentile"
                .into(),
        ));
    }
    let nc = cube
        .with_bands(cube.bands().scale(1.0 / s))?
        .with_scale(cube.scale() * s)?;
    let np = PanImage::new(pan.image().scale(1.0 / s))?.with_scale(pan.scale() * s)?;
    let (_, cmax) = nc.bands().min_max();
    let (_, pmax) = np.image().min_max();
    if cmax.max(pmax) > SOFT_UPPER_BOUND {
        log::warn!(
            "normalized values reach {:.3} (above {SOFT_UPPER_BOUND}); inputs have heavy bright tails",
            cmax.max(pmax)
        );
    }
    Ok((nc, np, s))
}

/// Multiplies values back by the stored scale; the result has scale 1.
pub fn denormalize_cube(cube: &DataCube) -> Result<DataCube> {
    cube.with_bands(cube.bands().scale(cube.scale()))?
        .with_scale(1.0)
}

pub fn denormalize_pan(pan: &PanImage) -> Result<PanImage> {
    PanImage::new(pan.image().scale(pan.scale()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cube(seed: u64, b: usize, h: usize, w: usize) -> DataCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // values representable in f32 so the round trip is exact
        let t = Tensor::from_fn(Shape::new(b, h, w), |_, _, _| {
            rng.gen_range(0.0f32..4000.0) as f64
        });
        let wl = (0..b).map(|i| 400.0 + 10.0 * i as f64).collect();
        DataCube::new(t, wl, 6).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cube = random_cube(1, 3, 5, 7).with_scale(2.5).unwrap();
        let back = cube_from_bytes(&cube_to_bytes(&cube).unwrap()).unwrap();
        assert_eq!(back, cube);
        let bits = |c: &DataCube| c.bands().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&cube));
    }

    #[test]
    fn golden_header_layout() {
        let t = Tensor::from_vec(Shape::new(1, 1, 2), vec![1.0, -2.0]).unwrap();
        let cube = DataCube::new(t, vec![550.0], 6).unwrap().with_scale(0.5).unwrap();
        let bytes = cube_to_bytes(&cube).unwrap();
        let mut golden = Vec::new();
        golden.extend_from_slice(b"RPNC");
        golden.extend_from_slice(&[1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 6, 0, 0, 0]);
        golden.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0xe0, 0x3f]);
        golden.extend_from_slice(&[0; 32]);
        golden.extend_from_slice(&[0x00, 0x80, 0x09, 0x44]);
        golden.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0]);
        assert_eq!(bytes, golden);
        let back = cube_from_bytes(&golden).unwrap();
        assert_eq!(back.wavelengths(), &[550.0]);
        assert_eq!(back.bands().data(), &[1.0, -2.0]);
        assert_eq!(back.scale(), 0.5);
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let cube = random_cube(2, 4, 3, 3);
        let mut bytes = cube_to_bytes(&cube).unwrap();
        bytes[16] = 5;
        // header now says 5 bands but there are 4 planes and 4 wavelengths
        let err = cube_from_bytes(&bytes).unwrap_err().to_string();
        let expected = 64 + 4 * 5 + 4 * 5 * 9;
        assert!(err.contains(&expected.to_string()), "{err}");
        assert!(err.contains(&bytes.len().to_string()), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = cube_to_bytes(&random_cube(3, 1, 2, 2)).unwrap();
        bytes[0] = b'X';
        assert!(matches!(cube_from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn unsorted_wavelengths_are_sorted_with_permutation() {
        let t = Tensor::from_fn(Shape::new(3, 2, 2), |c, _, _| c as f64);
        let cube = DataCube::from_unsorted(t, vec![900.0, 450.0, 600.0], 6).unwrap();
        assert_eq!(cube.wavelengths(), &[450.0, 600.0, 900.0]);
        assert_eq!(cube.permutation(), &[1, 2, 0]);
        for (i, &p) in cube.permutation().iter().enumerate() {
            assert!(cube.band(i).data().iter().all(|&v| v == p as f64));
        }
    }

    #[test]
    fn duplicate_wavelengths_rejected() {
        let t = Tensor::zeros(Shape::new(2, 2, 2));
        assert!(DataCube::from_unsorted(t, vec![500.0, 500.0], 6).is_err());
    }

    #[test]
    fn normalization_uses_max_rule_and_round_trips() {
        let cube = DataCube::new(
            Tensor::from_fn(Shape::new(1, 10, 10), |_, y, x| 40.0 * (y * 10 + x) as f64 + 40.0),
            vec![500.0],
            2,
        )
        .unwrap();
        let pan = PanImage::new(Tensor::filled(Shape::new(1, 20, 20), 3000.0)).unwrap();
        let (nc, np, s) = normalize_pair(&cube, &pan).unwrap();
        assert_eq!(s, 4000.0);
        assert_eq!(nc.scale(), 4000.0);
        assert_eq!(np.image().data()[0], 0.75);
        let back = denormalize_cube(&nc).unwrap();
        for (a, b) in back.bands().data().iter().zip(cube.bands().data()) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert_eq!(denormalize_pan(&np).unwrap().image(), pan.image());
    }

    #[test]
    fn all_zero_inputs_rejected() {
        let cube = DataCube::new(Tensor::zeros(Shape::new(1, 2, 2)), vec![500.0], 2).unwrap();
        let pan = PanImage::new(Tensor::zeros(Shape::new(1, 4, 4))).unwrap();
        assert!(normalize_pair(&cube, &pan).is_err());
    }

    #[test]
    fn pairing_ratio_checked() {
        let cube = random_cube(4, 1, 4, 4);
        let pan = PanImage::new(Tensor::zeros(Shape::new(1, 24, 20))).unwrap();
        assert!(check_pairing(&cube, &pan).is_err());
        let pan = PanImage::new(Tensor::zeros(Shape::new(1, 24, 24))).unwrap();
        assert!(check_pairing(&cube, &pan).is_ok());
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(percentile(&v, 99.9), 999.0);
        assert_eq!(percentile(&v, 100.0), 1000.0);
        assert_eq!(percentile(&[5.0], 99.9), 5.0);
    }

    #[test]
    fn pan_round_trip() {
        let pan = PanImage::new(Tensor::from_fn(Shape::new(1, 3, 4), |_, y, x| (y * 4 + x) as f64))
            .unwrap()
            .with_scale(7.0)
            .unwrap();
        let back = pan_from_bytes(&pan_to_bytes(&pan).unwrap()).unwrap();
        assert_eq!(back, pan);
        let cube_bytes = cube_to_bytes(&random_cube(5, 2, 2, 2)).unwrap();
        assert!(pan_from_bytes(&cube_bytes).is_err());
    }
}
