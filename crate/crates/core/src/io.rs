//! File formats: Middlebury `.flo`, 8-bit PNG and binary PPM frames, and the
//! checkpoint container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::warp::FlowField;

const FLO_MAGIC: f32 = 202021.25;

pub fn write_flo(path: &Path, flow: &FlowField<f32>) -> Result<()> {
    if flow.batch() != 1 {
        return Err(Error::Usage(format!(".flo holds one field, got a batch of {}", flow.batch())));
    }
    let (h, w) = (flow.height(), flow.width());
    let mut out = Vec::with_capacity(12 + 8 * h * w);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.at(0, y, x);
            out.extend_from_slice(&u.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display(), e))
}

pub fn read_flo(path: &Path) -> Result<FlowField<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display(), e))?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 {
        return Err(bad("truncated header"));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    if f32::from_le_bytes(word(0)) != FLO_MAGIC {
        return Err(bad("missing PIEH magic"));
    }
    let w = i32::from_le_bytes(word(4));
    let h = i32::from_le_bytes(word(8));
    if w <= 0 || h <= 0 {
        return Err(bad("non-positive dimensions"));
    }
    let (w, h) = (w as usize, h as usize);
    if bytes.len() != 12 + 8 * w * h {
        return Err(bad(&format!("expected {} bytes for {w}x{h}, found {}", 12 + 8 * w * h, bytes.len())));
    }
    let plane = w * h;
    let mut data = vec![0f32; 2 * plane];
    for p in 0..plane {
        data[p] = f32::from_le_bytes(word(12 + 8 * p));
        data[plane + p] = f32::from_le_bytes(word(16 + 8 * p));
    }
    FlowField::new(Tensor::new(vec![1, 2, h, w], data)?)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn interleave(frame: &Tensor<f32>) -> Result<(usize, usize, Vec<u8>)> {
    let s = frame.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Usage(format!("expected an RGB frame [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut out = vec![0u8; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            out[3 * p + c] = quantize(frame.data()[c * plane + p]);
        }
    }
    Ok((h, w, out))
}

fn planar(h: usize, w: usize, rgb: &[u8]) -> Result<Tensor<f32>> {
    let plane = h * w;
    let mut data = vec![0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = rgb[3 * p + c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path.display(), e))?))
}

fn encode_png(path: &Path, w: usize, h: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let mut enc = png::Encoder::new(create(path)?, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let fmt = |e: png::EncodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(fmt)?;
    writer.write_image_data(data).map_err(fmt)?;
    writer.finish().map_err(fmt)
}

/// Writes a `[3,H,W]` frame, clamping to `[0,1]` before quantizing.
pub fn write_png(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    let (h, w, rgb) = interleave(frame)?;
    encode_png(path, w, h, png::ColorType::Rgb, &rgb)
}

/// Writes an `[H,W]` map in `[0,1]` as 8-bit grayscale.
pub fn write_gray_png(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::Usage(format!("expected an [H,W] map, got {s:?}")));
    }
    let bytes: Vec<u8> = map.data().iter().map(|&v| quantize(v)).collect();
    encode_png(path, s[1], s[0], png::ColorType::Grayscale, &bytes)
}

/// Reads any 8/16-bit PNG as an RGB `[3,H,W]` frame in `[0,1]`.
pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path.display(), e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let fmt = |e: png::DecodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut reader = dec.read_info().map_err(fmt)?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf.to_vec(),
        png::ColorType::Rgba => buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(Error::Format(format!("{}: unexpanded palette", path.display()))),
    };
    planar(h, w, &rgb)
}

pub fn write_ppm(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    let (h, w, rgb) = interleave(frame)?;
    let mut out = create(path)?;
    let io = |e| Error::io(path.display(), e);
    write!(out, "P6\n{w} {h}\n255\n").map_err(io)?;
    out.write_all(&rgb).map_err(io)?;
    out.flush().map_err(io)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display(), e))?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let body = bytes.get(pos..pos + 3 * w * h).ok_or_else(|| bad("truncated pixel data"))?;
    planar(h, w, body)
}

/// Reads a frame by extension (`.png`, `.ppm`).
pub fn read_frame(path: &Path) -> Result<Tensor<f32>> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => read_png(path),
        Some("ppm") => read_ppm(path),
        _ => Err(Error::Input(format!("{}: unsupported frame format", path.display()))),
    }
}

pub fn write_frame(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("ppm") => write_ppm(path, frame),
        _ => write_png(path, frame),
    }
}

const CKPT_MAGIC: &[u8; 4] = b"VFIT";
pub const CKPT_VERSION: u32 = 1;

/// One named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Adam moments for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedMoments {
    pub name: String,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Everything needed to resume or deploy a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: String,
    /// The run configuration as JSON.
    pub config: String,
    pub step: u64,
    pub params: Vec<SavedTensor>,
    pub optimizer: Vec<SavedMoments>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn floats(&mut self, v: &[f32]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("implausible length {n} in checkpoint")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("non-UTF-8 string in checkpoint".into()))
    }
    fn floats(&mut self) -> Result<Vec<f32>> {
        let n = self.len()?;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CKPT_MAGIC);
        w.u32(CKPT_VERSION);
        w.str(&self.digest);
        w.str(&self.config);
        w.u64(self.step);
        w.u64(self.params.len() as u64);
        for p in &self.params {
            w.str(&p.name);
            w.u64(p.shape.len() as u64);
            for &d in &p.shape {
                w.u64(d as u64);
            }
            w.floats(&p.data);
        }
        w.u64(self.optimizer.len() as u64);
        for o in &self.optimizer {
            w.str(&o.name);
            w.u64(o.step);
            w.floats(&o.m);
            w.floats(&o.v);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint (missing VFIT magic)".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} is not supported (expected {CKPT_VERSION})"
            )));
        }
        let digest = r.str()?;
        let config = r.str()?;
        let step = r.u64()?;
        let n = r.len()?;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.str()?;
            let nd = r.len()?;
            let shape = (0..nd).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let data = r.floats()?;
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::Format(format!("parameter {name}: shape {shape:?} holds {} values", data.len())));
            }
            params.push(SavedTensor { name, shape, data });
        }
        let n = r.len()?;
        let mut optimizer = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.str()?;
            let step = r.u64()?;
            let m = r.floats()?;
            let v = r.floats()?;
            optimizer.push(SavedMoments { name, step, m, v });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            digest,
            config,
            step,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path.display(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display(), e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_frame() -> Tensor<f32> {
        let data = (0..3 * 5 * 7).map(|i| (i as f32 * 0.37).sin() * 0.45 + 0.5).collect();
        Tensor::new(vec![3, 5, 7], data).unwrap()
    }

    #[test]
    fn flo_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..2 * 4 * 6).map(|i| i as f32 * -0.731 + 0.1).collect();
        let f = FlowField::new(Tensor::new(vec![1, 2, 4, 6], data).unwrap()).unwrap();
        let p = dir.path().join("a.flo");
        write_flo(&p, &f).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"PIEH");
        assert_eq!(read_flo(&p).unwrap(), f);
    }

    #[test]
    fn flo_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.flo");
        std::fs::write(&p, b"nope nope nope").unwrap();
        assert_eq!(read_flo(&p).unwrap_err().category(), "format");
    }

    #[test]
    fn png_and_ppm_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let f = sample_frame();
        for name in ["f.png", "f.ppm"] {
            let p = dir.path().join(name);
            write_frame(&p, &f).unwrap();
            let back = read_frame(&p).unwrap();
            assert_eq!(back.shape(), f.shape());
            let err = back.data().iter().zip(f.data()).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
            assert!(err <= 0.5 / 255.0 + 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn export_clamps_instead_of_wrapping() {
        let dir = tempfile::tempdir().unwrap();
        let f = Tensor::new(vec![3, 1, 2], vec![-0.5, 1.5, 2.0, -3.0, 0.5, 1.0]).unwrap();
        let p = dir.path().join("c.png");
        write_png(&p, &f).unwrap();
        assert_eq!(read_png(&p).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let ck = Checkpoint {
            digest: "abc".into(),
            config: "{}".into(),
            step: 42,
            params: vec![SavedTensor {
                name: "w".into(),
                shape: vec![2, 2],
                data: vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE],
            }],
            optimizer: vec![SavedMoments {
                name: "w".into(),
                step: 3,
                m: vec![0.1; 4],
                v: vec![0.2; 4],
            }],
        };
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"VFIT");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert_eq!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err().category(), "format");
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version"));
    }
}
