//! Exponential moving average of student weights into the teacher.

use crate::error::{CghError, Result};
use crate::model::Weights;
use crate::nn::ParamStore;

/// `t <- m * t + (1 - m) * s` for every tensor of `teacher`.
pub fn ema_update_store(teacher: &mut ParamStore, student: &ParamStore, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(CghError::invalid("ema_momentum", "must lie in [0, 1]"));
    }
    teacher.check_layout(student)?;
    let mf = m as f32;
    let rest = (1.0 - m) as f32;
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        if m == 1.0 {
            continue;
        }
        if m == 0.0 {
            t.data.copy_from_slice(&s.data);
            continue;
        }
        for (tv, &sv) in t.data.iter_mut().zip(&s.data) {
            *tv = mf * *tv + rest * sv;
        }
    }
    Ok(())
}

/// Updates parameters and batch-norm running statistics alike.
pub fn ema_update(teacher: &mut Weights, student: &Weights, m: f64) -> Result<()> {
    ema_update_store(&mut teacher.params, &student.params, m)?;
    ema_update_store(&mut teacher.buffers, &student.buffers, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn store(v: f32) -> ParamStore {
        let mut p = ParamStore::new();
        p.add("a", Tensor::filled(&[2, 2], v));
        p.add("b", Tensor::filled(&[3], v));
        p
    }

    #[test]
    fn endpoints() {
        let s = store(1.0);
        let mut t = store(0.0);
        ema_update_store(&mut t, &s, 1.0).unwrap();
        assert_eq!(t, store(0.0));
        ema_update_store(&mut t, &s, 0.0).unwrap();
        assert_eq!(t, s);
    }

    #[test]
    fn single_step_and_closed_form() {
        let mut t = store(1.0);
        let s = store(0.0);
        ema_update_store(&mut t, &s, 0.999).unwrap();
        assert!((t.tensors()[0].data[0] - 0.999).abs() < 1e-7);
        for _ in 1..50 {
            ema_update_store(&mut t, &s, 0.999).unwrap();
        }
        let expect = 0.999f64.powi(50);
        assert!((t.tensors()[1].data[2] as f64 - expect).abs() < 1e-5);
    }

    #[test]
    fn layout_mismatch_and_range() {
        let mut t = store(0.0);
        let mut s = store(1.0);
        s.add("c", Tensor::zeros(&[1]));
        assert!(ema_update_store(&mut t, &s, 0.5).is_err());
        assert!(ema_update_store(&mut t, &store(1.0), 1.5).is_err());
    }
}
