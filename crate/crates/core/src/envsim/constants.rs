//! Physical constants shared by the simulated environment families.

pub const DT: f64 = 0.05;
pub const GRAVITY: f64 = 9.8;

// SlidePuck
pub const PADDLE_FORCE_MAX: f64 = 30.0;
pub const PADDLE_DRAG: f64 = 0.5;
pub const TABLE_FRICTION: f64 = 0.1;
pub const RESTITUTION: f64 = 0.9;
pub const PADDLE_RADIUS: f64 = 0.05;
pub const PUCK_RADIUS: f64 = 0.05;
pub const PADDLE_START: [f64; 2] = [0.0, 0.0];
pub const PUCK_START: [f64; 2] = [0.5, 0.0];
pub const GOAL: [f64; 2] = [2.0, 0.0];
/// Paddle workspace `[x_min, x_max, y_min, y_max]`. The paddle can only
/// just reach the puck's starting position, so it strikes rather than pushes.
pub const PADDLE_WORKSPACE: [f64; 4] = [-0.5, 0.45, -0.5, 0.5];
pub const PUCK_RESET_SPEED: f64 = 0.1;
pub const SLIDE_PUCK_EPISODE: usize = 100;

// SpringHopper
pub const LEG_STIFFNESS: f64 = 200.0;
pub const LEG_REST_LENGTH: f64 = 1.0;
/// Rest-length change per unit of action.
pub const LEG_THRUST: f64 = 0.3;
/// Fraction of the actuated spring force redirected forward.
pub const LEG_LEAN: f64 = 0.5;
/// Gain and time constant of the torso pitch proxy (a lagged copy of forward speed).
pub const PITCH_GAIN: f64 = 0.05;
pub const PITCH_TIME_CONSTANT: f64 = 0.5;
pub const ALIVE_HEIGHT_FRACTION: f64 = 0.7;
pub const ALIVE_PITCH: f64 = 0.2;
pub const HOPPER_RESET_NOISE: f64 = 0.005;
pub const SPRING_HOPPER_EPISODE: usize = 400;
