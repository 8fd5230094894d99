//! Browser demo: draw a random phantom, scan it with a missing wedge and
//! compare FBP against TV reconstruction.

use rnsde::eval::{psnr, tv_reconstruct, TvConfig};
use rnsde::numerics::Tensor;
use rnsde::phantoms::{generate_phantom, PhantomSpec};
use rnsde::tomography::{fbp, Geometry, Image, RadonOperator, Sinogram};
use wasm_bindgen::prelude::*;

fn js_err(e: rnsde::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Grayscale RGBA bytes for a canvas `ImageData`, mapping `[lo, hi]` to black..white.
fn rgba(x: &Tensor, lo: f64, hi: f64) -> Vec<u8> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    x.data()
        .iter()
        .flat_map(|v| {
            let g = (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

#[wasm_bindgen]
pub struct Demo {
    size: usize,
    phantom: Image,
    op: RadonOperator,
    sino: Sinogram,
    recon: Image,
}

#[wasm_bindgen]
impl Demo {
    /// Phantom `seed` at `size`×`size`, scanned every 2° with a `theta_miss` wedge.
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, seed: u32, theta_miss: f64) -> Result<Demo, JsValue> {
        let spec = PhantomSpec {
            size,
            ..Default::default()
        };
        spec.validate().map_err(js_err)?;
        let phantom = generate_phantom(&spec, seed as u64).map_err(js_err)?;
        let op = RadonOperator::new(&Geometry::limited(size, 2.0, theta_miss).map_err(js_err)?).map_err(js_err)?;
        let sino = op.project(&phantom).map_err(js_err)?;
        let recon = fbp(&sino).map_err(js_err)?;
        Ok(Demo {
            size,
            phantom,
            op,
            sino,
            recon,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn views(&self) -> usize {
        self.sino.geometry().num_angles()
    }

    /// Re-scans the current phantom with a new missing wedge and runs FBP.
    pub fn set_wedge(&mut self, theta_miss: f64) -> Result<(), JsValue> {
        self.op = RadonOperator::new(&Geometry::limited(self.size, 2.0, theta_miss).map_err(js_err)?).map_err(js_err)?;
        self.sino = self.op.project(&self.phantom).map_err(js_err)?;
        self.recon = fbp(&self.sino).map_err(js_err)?;
        Ok(())
    }

    /// Replaces the reconstruction with FBP.
    pub fn run_fbp(&mut self) -> Result<(), JsValue> {
        self.recon = fbp(&self.sino).map_err(js_err)?;
        Ok(())
    }

    /// Replaces the reconstruction with a TV-regularised solve.
    pub fn run_tv(&mut self, lambda: f64, iters: usize) -> Result<(), JsValue> {
        let cfg = TvConfig {
            lambda,
            iters,
            ..Default::default()
        };
        self.recon = tv_reconstruct(&self.sino, &self.op, &cfg).map_err(js_err)?.image;
        Ok(())
    }

    /// PSNR of the current reconstruction in dB.
    pub fn psnr(&self) -> f64 {
        psnr(self.recon.pixels(), self.phantom.pixels(), 1.0).unwrap_or(f64::NAN)
    }

    pub fn phantom_rgba(&self) -> Vec<u8> {
        rgba(self.phantom.pixels(), 0.0, 1.0)
    }

    pub fn recon_rgba(&self) -> Vec<u8> {
        rgba(self.recon.pixels(), 0.0, 1.0)
    }

    /// Sinogram as a `views`×`size` image scaled to its maximum.
    pub fn sino_rgba(&self) -> Vec<u8> {
        let hi = self.sino.values().data().iter().cloned().fold(0.0, f64::max);
        rgba(self.sino.values(), 0.0, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tv_beats_fbp_on_a_wedge() {
        let mut d = Demo::new(32, 3, 90.0).unwrap();
        assert_eq!(d.phantom_rgba().len(), 32 * 32 * 4);
        assert_eq!(d.sino_rgba().len(), d.views() * 32 * 4);
        let f = d.psnr();
        d.run_tv(0.03, 100).unwrap();
        assert!(d.psnr() > f);
        d.set_wedge(30.0).unwrap();
        assert!(d.psnr() > f);
    }
}
