//! Fixed-step classical Runge-Kutta integration.

use crate::error::Result;

/// Samples of an integrated trajectory. `exited` marks a partial result that stopped
/// because the state left its admissible region or the vector field failed.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub y: Vec<Vec<f64>>,
    pub exited: bool,
    pub reason: Option<String>,
}

impl Trajectory {
    pub fn last(&self) -> &[f64] {
        self.y.last().expect("trajectory has at least the initial sample")
    }

    pub fn end_time(&self) -> f64 {
        *self.t.last().unwrap()
    }
}

/// Number of equal steps covering `span` with steps no longer than `h`.
pub fn step_count(span: f64, h: f64) -> usize {
    ((span.abs() / h) - 1e-9).ceil().max(1.0) as usize
}

/// One RK4 step of `y' = f(t, y)`.
pub fn rk4_step<F>(f: &mut F, t: f64, y: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let m = y.len();
    let mut k1 = vec![0.0; m];
    let mut k2 = vec![0.0; m];
    let mut k3 = vec![0.0; m];
    let mut k4 = vec![0.0; m];
    let mut tmp = vec![0.0; m];
    f(t, y, &mut k1)?;
    for i in 0..m {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    f(t + 0.5 * h, &tmp, &mut k2)?;
    for i in 0..m {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    f(t + 0.5 * h, &tmp, &mut k3)?;
    for i in 0..m {
        tmp[i] = y[i] + h * k3[i];
    }
    f(t + h, &tmp, &mut k4)?;
    Ok((0..m).map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect())
}

/// Integrate over `[t0, t0 + span]` with the step adjusted to land on the endpoint.
/// Integration stops (flagged) as soon as `admissible` rejects a state or `f` fails.
pub fn integrate<F, A>(
    mut f: F,
    admissible: A,
    y0: &[f64],
    t0: f64,
    span: f64,
    h: f64,
    keep_samples: bool,
) -> Trajectory
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
    A: Fn(&[f64]) -> bool,
{
    let steps = step_count(span, h);
    let dt = span / steps as f64;
    let mut traj = Trajectory { t: vec![t0], y: vec![y0.to_vec()], exited: false, reason: None };
    let mut y = y0.to_vec();
    for s in 0..steps {
        let t = t0 + s as f64 * dt;
        match rk4_step(&mut f, t, &y, dt) {
            Ok(next) => {
                if !next.iter().all(|v| v.is_finite()) || !admissible(&next) {
                    traj.exited = true;
                    traj.reason = Some("left the admissible region".into());
                    break;
                }
                y = next;
            }
            Err(e) => {
                traj.exited = true;
                traj.reason = Some(e.to_string());
                break;
            }
        }
        let tn = t0 + (s + 1) as f64 * dt;
        if keep_samples {
            traj.t.push(tn);
            traj.y.push(y.clone());
        } else {
            traj.t[0] = tn;
            traj.y[0] = y.clone();
        }
    }
    traj
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_order_four() {
        let run = |h: f64| {
            let tr = integrate(
                |_, y, dy| {
                    dy[0] = -y[0];
                    Ok(())
                },
                |_| true,
                &[1.0],
                0.0,
                1.0,
                h,
                false,
            );
            (tr.last()[0] - (-1.0f64).exp()).abs()
        };
        let ratio = run(0.1) / run(0.05);
        assert!((ratio - 16.0).abs() < 1.0, "ratio {ratio}");
    }

    #[test]
    fn stops_at_boundary() {
        let tr = integrate(
            |_, _, dy| {
                dy[0] = 1.0;
                Ok(())
            },
            |y| y[0] < 0.5,
            &[0.0],
            0.0,
            1.0,
            0.01,
            true,
        );
        assert!(tr.exited);
        assert!(tr.last()[0] < 0.5);
        assert!(tr.last()[0] > 0.48);
    }
}
