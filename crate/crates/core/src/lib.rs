pub mod numerics;
pub mod preference;
pub mod seeding;
pub mod trainer;
pub mod envs;
pub mod annotation;
pub mod rl;
pub mod lapp_loop;
pub mod io;
